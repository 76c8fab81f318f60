use nvf_core::backbone::ModelConfig;
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::evaluate;
use nvf_core::patchify::PatchSpec;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{train, TrainConfig, TuningMode};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);

    let dir = std::path::PathBuf::from("/tmp/calib_full");
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.jsonl").exists() {
        load_manifest(&dir.join("manifest.jsonl")).unwrap()
    } else {
        build_corpus(&CorpusConfig::default_desk(5), &dir).unwrap()
    };
    println!("corpus ready in {:.1}s ({} records)", t0.elapsed().as_secs_f64(), manifest.records.len());

    let mode = TuningMode::Full;
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = lr;
    cfg.batch_size = batch;
    cfg.max_epochs = epochs;
    cfg.patience = None;
    cfg.frames_t = 8;
    cfg.resolution = ResolutionMode::Dynamic { min_pixels: 96*96, max_pixels: 192*192 };
    cfg.model = ModelConfig::sized(layers, dim, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();

    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    println!("train {} videos, val {}", train_set.len(), val_set.len());
    let t1 = Instant::now();
    let (ckpt, log) = train(&train_set, &val_set, &manifest.base_dir, &mode, &cfg).unwrap();
    for e in &log {
        println!("epoch {}: train {:.4} val {:.4} ({:.1}s)", e.epoch, e.train_loss, e.val_loss, e.elapsed_s);
    }
    let report = evaluate(&ckpt, &manifest, Split::Test, 0.5).unwrap();
    println!("test ACC {:.2} mACC {:?} | train {:.1}s total {:.1}s",
        report.overall_acc, report.m_acc, t1.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
    for s in &report.subsets {
        println!("  {}: acc {:?} recall {:.1}", s.generator, s.acc, s.recall);
    }
}
