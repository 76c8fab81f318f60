use nvf_core::backbone::ModelConfig;
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::evaluate;
use nvf_core::patchify::PatchSpec;
use nvf_core::train::{train, TrainConfig, TuningMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let max_px: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(448);
    let frames: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let manifest = load_manifest(std::path::Path::new("/tmp/calib_hires/manifest.jsonl")).unwrap();
    let mode = TuningMode::Full;
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = epochs;
    cfg.patience = None;
    cfg.frames_t = frames;
    cfg.max_tokens = 4096;
    cfg.resolution = ResolutionMode::Dynamic { min_pixels: 224*224, max_pixels: max_px*max_px };
    cfg.model = ModelConfig::sized(2, 32, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    let (ckpt, log) = train(&train_set, &val_set, &manifest.base_dir, &mode, &cfg).unwrap();
    for e in &log {
        println!("epoch {}: train {:.4} val {:.4} ({:.0}s)", e.epoch, e.train_loss, e.val_loss, e.elapsed_s);
    }
    let report = evaluate(&ckpt, &manifest, Split::Test, 0.5).unwrap();
    println!("dyn{max_px} T={frames}: test ACC {:.2}", report.overall_acc);
}
