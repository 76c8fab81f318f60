use nvf_core::backbone::{LoraConfig, ModelConfig};
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::evaluate;
use nvf_core::patchify::PatchSpec;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{train, TrainConfig, TuningMode};
use std::time::Instant;

fn run_arm(manifest: &nvf_core::ingest::DatasetManifest, name: &str, mode: TuningMode, lr: f64) -> f64 {
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = lr;
    cfg.batch_size = 8;
    cfg.max_epochs = 5;
    cfg.patience = None;
    cfg.frames_t = 8;
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
    println!("{name}: ACC {:.2} ({:.0}s)", report.overall_acc, t.elapsed().as_secs_f64());
    report.overall_acc
}

fn main() {
    // smaller slice of the default corpus for speed
    let dir = std::path::PathBuf::from("/tmp/calib_tuning");
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.jsonl").exists() {
        load_manifest(&dir.join("manifest.jsonl")).unwrap()
    } else {
        let mut c = CorpusConfig::default_desk(5);
        c.reals = nvf_core::synthdata::SplitCounts { train: 80, val: 24, test: 24 };
        c.fakes_per_profile = nvf_core::synthdata::SplitCounts { train: 20, val: 6, test: 6 };
        build_corpus(&c, &dir).unwrap()
    };
    println!("corpus {:.0}s ({})", t0.elapsed().as_secs_f64(), manifest.records.len());
    let lp = run_arm(&manifest, "lp  ", TuningMode::LinearProbe, 1e-2);
    let lora = run_arm(&manifest, "lora", TuningMode::Lora(LoraConfig::default()), 2e-3);
    let full = run_arm(&manifest, "full", TuningMode::Full, 1e-3);
    println!("ordering: lp {lp:.1} <= lora {lora:.1} <= full {full:.1} | total {:.0}s", t0.elapsed().as_secs_f64());
}
