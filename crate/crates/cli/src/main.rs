//! `nvf` — report-driven command line for the native-resolution
//! AI-generated-video detector. Non-interactive by design: every run writes
//! its resolved configuration and a run log next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nvf_core::backbone::{LoraConfig, ModelConfig};
use nvf_core::checkpoint::{load_checkpoint, save_checkpoint, ResolutionMode};
use nvf_core::crossval;
use nvf_core::ingest::{load_manifest, Split};
use nvf_core::metrics::{self, DEFAULT_THRESHOLD};
use nvf_core::patchify::PatchSpec;
use nvf_core::robustness;
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{self, gradient_check_model, TrainConfig, TuningMode};

#[derive(Parser)]
#[command(name = "nvf", about = "native-resolution AI-generated-video detection")]
struct Cli {
    /// Root seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (env NVF_THREADS). Determinism is guaranteed at 1.
    #[arg(long, global = true, env = "NVF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural synthetic corpus.
    Synth(SynthArgs),
    /// Train a detector on a corpus manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-generator ACC/Recall/F1/AP/AUC/bACC.
    Eval(EvalArgs),
    /// Cross-generator recall matrix, 2D embedding, quality correlation.
    Crossval(CrossvalArgs),
    /// Robustness sweep: relative accuracy under perturbations.
    Perturb(PerturbArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Default,
    HighRes,
    Flicker,
    QualityLadder,
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus preset; ignored when --config is given.
    #[arg(long, value_enum, default_value = "default")]
    preset: PresetArg,
    /// Full CorpusConfig as JSON; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Lp,
    Lora,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResolutionArg {
    Crop224,
    Resize224,
    Dynamic,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    #[arg(long, default_value_t = 16)]
    lora_rank: usize,
    #[arg(long, default_value_t = 16.0)]
    lora_alpha: f64,
    #[arg(long, value_enum, default_value = "dynamic")]
    resolution: ResolutionArg,
    #[arg(long, default_value_t = 224 * 224)]
    min_pixels: usize,
    #[arg(long, default_value_t = 720 * 720)]
    max_pixels: usize,
    /// Frames per sampled clip (T).
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Full-attention layer ids, comma separated; defaults per depth.
    #[arg(long)]
    full_attn: Option<String>,
    #[arg(long, default_value_t = 16384)]
    max_tokens: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(v: SplitArg) -> Split {
        match v {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct CrossvalArgs {
    /// Import an externally produced recall matrix (percent values) and
    /// re-run the analysis only.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Corpus manifest for the full train-and-evaluate protocol.
    #[arg(long, required_unless_present = "matrix")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    train: CrossvalTrainArgs,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossvalTrainArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 96 * 96)]
    min_pixels: usize,
    #[arg(long, default_value_t = 192 * 192)]
    max_pixels: usize,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Perturbation grid as JSON ([{"kind":"jpeg","quality":50}, ...]);
    /// defaults to the documented sweep.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Patch grid of the probe input, "t x h x w" in patches.
    #[arg(long, default_value = "2x4x8")]
    grid: String,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Coordinates probed per tensor per seed (0 = exhaustive).
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();
    if let Err(err) = run(cli, threads) {
        // machine-readable error report on stderr
        let report = serde_json::json!({ "error": err.to_string() });
        eprintln!("{report}");
        std::process::exit(1);
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Run log: enough to re-derive the command line.
fn write_run_log(out: &Path, seed: u64, threads: usize, outputs: &[&str]) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    write_json(
        &out.join("run.json"),
        &serde_json::json!({
            "argv": argv,
            "seed": seed,
            "threads": threads,
            "outputs": outputs,
        }),
    )
}

fn run(cli: Cli, threads: usize) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, seed, threads),
        Command::Train(args) => cmd_train(args, seed, threads),
        Command::Eval(args) => cmd_eval(args, seed, threads),
        Command::Crossval(args) => cmd_crossval(args, seed, threads),
        Command::Perturb(args) => cmd_perturb(args, seed, threads),
        Command::Gradcheck(args) => cmd_gradcheck(args, seed, threads),
    }
}

fn cmd_synth(args: SynthArgs, seed: u64, threads: usize) -> Result<()> {
    prepare_out(&args.out)?;
    let config: CorpusConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)?
        }
        None => match args.preset {
            PresetArg::Default => CorpusConfig::default_desk(seed),
            PresetArg::HighRes => CorpusConfig::high_res_artifacts(seed),
            PresetArg::Flicker => CorpusConfig::flicker_dominant(seed),
            PresetArg::QualityLadder => CorpusConfig::quality_ladder(seed),
        },
    };
    write_json(&args.out.join("resolved_config.json"), &config)?;
    let manifest = build_corpus(&config, &args.out)?;
    write_run_log(&args.out, seed, threads, &["manifest.jsonl", "videos/"])?;
    println!(
        "synth: {} videos under {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

fn build_train_config(args: &TrainArgs, seed: u64) -> Result<(TuningMode, TrainConfig)> {
    let mode = match args.mode {
        ModeArg::Full => TuningMode::Full,
        ModeArg::Lp => TuningMode::LinearProbe,
        ModeArg::Lora => TuningMode::Lora(LoraConfig {
            rank: args.lora_rank,
            alpha: args.lora_alpha,
            ..LoraConfig::default()
        }),
    };
    let mut cfg = TrainConfig::for_mode(&mode);
    cfg.seed = seed;
    cfg.frames_t = args.frames;
    cfg.max_tokens = args.max_tokens;
    cfg.resolution = match args.resolution {
        ResolutionArg::Crop224 => ResolutionMode::Crop224,
        ResolutionArg::Resize224 => ResolutionMode::Resize224,
        ResolutionArg::Dynamic => ResolutionMode::Dynamic {
            min_pixels: args.min_pixels,
            max_pixels: args.max_pixels,
        },
    };
    let mut model = ModelConfig::sized(args.layers, args.dim, args.heads);
    model.window_side = args.window;
    if let Some(ids) = &args.full_attn {
        model.full_attn_layers = if ids.trim().is_empty() {
            Vec::new()
        } else {
            ids.split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .context("parsing --full-attn")?
        };
    }
    model.validate()?;
    cfg.model = model;
    cfg.patch = PatchSpec::default();
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if args.patience.is_some() {
        cfg.patience = args.patience;
    }
    Ok((mode, cfg))
}

fn cmd_train(args: TrainArgs, seed: u64, threads: usize) -> Result<()> {
    prepare_out(&args.out)?;
    let manifest = load_manifest(&args.manifest)?;
    let (mode, cfg) = build_train_config(&args, seed)?;
    write_json(
        &args.out.join("resolved_config.json"),
        &serde_json::json!({ "mode": &mode, "train": &cfg }),
    )?;
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    if train_set.is_empty() {
        bail!("empty split: training");
    }
    let (ckpt, log) = train::train(&train_set, &val_set, &manifest.base_dir, &mode, &cfg)?;
    save_checkpoint(&args.out.join("checkpoint.nvf"), &ckpt)?;
    let mut log_lines = String::new();
    for entry in &log {
        log_lines.push_str(&serde_json::to_string(entry)?);
        log_lines.push('\n');
    }
    fs::write(args.out.join("train_log.jsonl"), log_lines)?;
    write_run_log(&args.out, seed, threads, &["checkpoint.nvf", "train_log.jsonl"])?;
    let last = log.last().expect("≥1 epoch");
    println!(
        "train: {} epochs, final train loss {:.4}, val loss {:.4} → {}",
        log.len(),
        last.train_loss,
        last.val_loss,
        args.out.join("checkpoint.nvf").display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, seed: u64, threads: usize) -> Result<()> {
    prepare_out(&args.out)?;
    let manifest = load_manifest(&args.manifest)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    write_json(
        &args.out.join("resolved_config.json"),
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "split": Split::from(args.split),
            "threshold": args.threshold,
        }),
    )?;
    let report = metrics::evaluate(&ckpt, &manifest, args.split.into(), args.threshold)?;
    metrics::write_report(&args.out, &report)?;
    write_run_log(&args.out, seed, threads, &["report.json", "report.csv"])?;
    println!(
        "eval: overall ACC {:.2}%, mACC {:?}, mAP {:?}",
        report.overall_acc, report.m_acc, report.m_ap
    );
    Ok(())
}

fn cmd_crossval(args: CrossvalArgs, seed: u64, threads: usize) -> Result<()> {
    prepare_out(&args.out)?;
    let (matrix, quality) = if let Some(matrix_path) = &args.matrix {
        (crossval::load_matrix(matrix_path)?, None)
    } else {
        let manifest = load_manifest(args.manifest.as_ref().expect("clap enforces"))?;
        let t = &args.train;
        let mode = TuningMode::Full;
        let mut cfg = TrainConfig::for_mode(&mode);
        cfg.seed = seed;
        cfg.learning_rate = t.lr;
        cfg.batch_size = t.batch_size;
        cfg.max_epochs = t.epochs;
        cfg.frames_t = t.frames;
        cfg.resolution = ResolutionMode::Dynamic {
            min_pixels: t.min_pixels,
            max_pixels: t.max_pixels,
        };
        let mut model = ModelConfig::sized(t.layers, t.dim, t.heads);
        model.window_side = 8;
        cfg.model = model;
        let matrix = crossval::build_matrix(&manifest, &cfg, &mode)?;
        // per-generator quality scores from the manifest
        let quality: Option<Vec<f64>> = matrix
            .generators
            .iter()
            .map(|g| {
                let qs: Vec<f64> = manifest
                    .records
                    .iter()
                    .filter(|r| &r.generator == g)
                    .filter_map(|r| r.quality)
                    .collect();
                if qs.is_empty() {
                    None
                } else {
                    Some(qs.iter().sum::<f64>() / qs.len() as f64)
                }
            })
            .collect();
        (matrix, quality)
    };
    write_json(&args.out.join("resolved_config.json"), &serde_json::json!({
        "matrix_import": args.matrix,
        "restarts": args.restarts,
        "max_iter": args.max_iter,
        "tol": args.tol,
    }))?;
    let d = crossval::distance(&matrix)?;
    let embedding = crossval::nmds(
        &d,
        &matrix.generators,
        seed,
        args.max_iter,
        args.tol,
        args.restarts,
    )?;
    let correlation = match quality {
        Some(q) if matrix.generators.len() >= 2 => {
            Some(crossval::correlation_report(&matrix, &q)?)
        }
        _ => None,
    };
    crossval::write_analysis(&args.out, &matrix, &embedding, correlation.as_ref())?;
    write_run_log(
        &args.out,
        seed,
        threads,
        &["matrix.json", "embedding.json", "embedding.csv", "correlation.json"],
    )?;
    println!(
        "crossval: {} generators, embedding stress {:.4}{}",
        matrix.generators.len(),
        embedding.stress,
        correlation
            .map(|c| format!(", quality/recall ρ = {:.3}", c.rho))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_perturb(args: PerturbArgs, seed: u64, threads: usize) -> Result<()> {
    prepare_out(&args.out)?;
    let manifest = load_manifest(&args.manifest)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let grid: Vec<robustness::Perturbation> = match &args.grid {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => robustness::default_grid(),
    };
    write_json(
        &args.out.join("resolved_config.json"),
        &serde_json::json!({ "grid": &grid, "threshold": args.threshold }),
    )?;
    let curve =
        robustness::robustness_curve(&ckpt, &manifest, args.split.into(), &grid, args.threshold)?;
    fs::write(args.out.join("curve.csv"), robustness::curve_to_csv(&curve))?;
    write_json(&args.out.join("curve.json"), &curve)?;
    write_run_log(&args.out, seed, threads, &["curve.csv", "curve.json"])?;
    println!("perturb: {} grid points → {}", curve.len(), args.out.join("curve.csv").display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, seed: u64, threads: usize) -> Result<()> {
    let dims: Vec<usize> = args
        .grid
        .split('x')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("parsing --grid as TxHxW")?;
    if dims.len() != 3 {
        bail!("--grid must have three components, e.g. 2x4x8");
    }
    let mut model = ModelConfig::sized(args.layers, args.dim, args.heads);
    model.window_side = args.window;
    model.validate()?;
    let patch = PatchSpec::new(1, 2, 2)?;
    let coords = if args.coords == 0 {
        None
    } else {
        Some(args.coords)
    };
    let _ = seed;
    let worst = gradient_check_model(
        &model,
        &patch,
        (dims[0], dims[1], dims[2]),
        args.seeds,
        args.step,
        coords,
    )?;
    let report = serde_json::json!({
        "layers": args.layers,
        "dim": args.dim,
        "heads": args.heads,
        "grid": args.grid,
        "seeds": args.seeds,
        "step": args.step,
        "coords_per_tensor": args.coords,
        "max_relative_error": worst,
        "threshold": args.threshold,
        "pass": worst <= args.threshold,
    });
    if let Some(out) = &args.out {
        prepare_out(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
        write_run_log(out, seed, threads, &["gradcheck.json"])?;
    }
    println!("{report}");
    if worst > args.threshold {
        bail!("gradient check failed: max relative error {worst:e} > {:e}", args.threshold);
    }
    Ok(())
}
