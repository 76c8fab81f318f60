use nvf_core::backbone::ModelConfig;
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::crossval::{build_matrix, correlation_report};
use nvf_core::ingest::load_manifest;
use nvf_core::patchify::PatchSpec;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{TrainConfig, TuningMode};
use std::time::Instant;

fn main() {
    let dir = std::path::PathBuf::from("/tmp/calib_ladder");
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.jsonl").exists() {
        load_manifest(&dir.join("manifest.jsonl")).unwrap()
    } else {
        build_corpus(&CorpusConfig::quality_ladder(5), &dir).unwrap()
    };
    println!("corpus {:.0}s ({})", t0.elapsed().as_secs_f64(), manifest.records.len());
    let mode = TuningMode::Full;
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = 7;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 5;
    cfg.patience = None;
    cfg.frames_t = 4;
    cfg.max_tokens = 2048;
    cfg.resolution = ResolutionMode::Dynamic { min_pixels: 96*96, max_pixels: 192*192 };
    cfg.model = ModelConfig::sized(2, 32, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();
    let matrix = build_matrix(&manifest, &cfg, &mode).unwrap();
    for (i, row) in matrix.recall.iter().enumerate() {
        println!("{}: {:?}", matrix.generators[i], row.iter().map(|v| *v as i32).collect::<Vec<_>>());
    }
    let quality: Vec<f64> = matrix.generators.iter().map(|g| {
        manifest.records.iter().find(|r| &r.generator == g).and_then(|r| r.quality).unwrap()
    }).collect();
    let report = correlation_report(&matrix, &quality).unwrap();
    println!("quality {:?}", report.quality);
    println!("mean cross recall {:?}", report.mean_cross_recall.iter().map(|v| *v as i32).collect::<Vec<_>>());
    println!("rho = {:.3} | total {:.0}s", report.rho, t0.elapsed().as_secs_f64());
}
