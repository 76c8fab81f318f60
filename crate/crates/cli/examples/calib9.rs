use nvf_core::backbone::ModelConfig;
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::evaluate;
use nvf_core::patchify::PatchSpec;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{train, TrainConfig, TuningMode};
use std::time::Instant;

fn run_arm(manifest: &nvf_core::ingest::DatasetManifest, name: &str, res: ResolutionMode) -> f64 {
    let mode = TuningMode::Full;
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 10;
    cfg.patience = None;
    cfg.frames_t = 2;
    cfg.max_tokens = 4096;
    cfg.resolution = res;
    cfg.model = ModelConfig::sized(2, 32, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    let t = Instant::now();
    let (ckpt, _) = train(&train_set, &val_set, &manifest.base_dir, &mode, &cfg).unwrap();
    let report = evaluate(&ckpt, &manifest, Split::Test, 0.5).unwrap();
    println!("{name}: ACC {:.2} ({:.0}s)", report.overall_acc, t.elapsed().as_secs_f64());
    report.overall_acc
}

fn main() {
    let dir = std::path::PathBuf::from("/tmp/calib_hires");
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.jsonl").exists() {
        load_manifest(&dir.join("manifest.jsonl")).unwrap()
    } else {
        build_corpus(&CorpusConfig::high_res_artifacts(5), &dir).unwrap()
    };
    println!("corpus {:.0}s ({} records)", t0.elapsed().as_secs_f64(), manifest.records.len());
    let crop = run_arm(&manifest, "crop224  ", ResolutionMode::Crop224);
    let resize = run_arm(&manifest, "resize224", ResolutionMode::Resize224);
    let dyn448 = run_arm(&manifest, "dyn448   ", ResolutionMode::Dynamic { min_pixels: 224*224, max_pixels: 448*448 });
    let dyn720 = run_arm(&manifest, "dyn720   ", ResolutionMode::Dynamic { min_pixels: 224*224, max_pixels: 720*720 });
    println!("ordering: crop {crop:.1} < resize {resize:.1} < dyn448 {dyn448:.1} <= dyn720 {dyn720:.1}");
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
