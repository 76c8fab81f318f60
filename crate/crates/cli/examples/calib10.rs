use nvf_core::backbone::ModelConfig;
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::evaluate;
use nvf_core::patchify::PatchSpec;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{train, TrainConfig, TuningMode};
use std::time::Instant;

fn run_arm(manifest: &nvf_core::ingest::DatasetManifest, frames_t: usize) -> f64 {
    let mode = TuningMode::Full;
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 5;
    cfg.patience = None;
    cfg.frames_t = frames_t;
    cfg.max_tokens = 2048;
    cfg.resolution = ResolutionMode::Dynamic { min_pixels: 96*96, max_pixels: 192*192 };
    cfg.model = ModelConfig::sized(2, 32, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    let t = Instant::now();
    let (ckpt, _) = train(&train_set, &val_set, &manifest.base_dir, &mode, &cfg).unwrap();
    let report = evaluate(&ckpt, &manifest, Split::Test, 0.5).unwrap();
    println!("T={frames_t}: ACC {:.2} ({:.0}s)", report.overall_acc, t.elapsed().as_secs_f64());
    report.overall_acc
}

fn main() {
    let dir = std::path::PathBuf::from("/tmp/calib_flicker");
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.jsonl").exists() {
        load_manifest(&dir.join("manifest.jsonl")).unwrap()
    } else {
        build_corpus(&CorpusConfig::flicker_dominant(5), &dir).unwrap()
    };
    println!("corpus {:.0}s ({})", t0.elapsed().as_secs_f64(), manifest.records.len());
    let a2 = run_arm(&manifest, 2);
    let a4 = run_arm(&manifest, 4);
    let a8 = run_arm(&manifest, 8);
    println!("ordering: T2 {a2:.1} <= T4 {a4:.1} <= T8 {a8:.1}  | total {:.0}s", t0.elapsed().as_secs_f64());
}
