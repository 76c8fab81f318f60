//! Classifier head, loss, AdamW, and the training loop with the three
//! tuning strategies: full fine-tuning, linear probing, and LoRA.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use nvf_tensor::{NodeId, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_features, stage_params, LoraConfig, ModelConfig, ModelParams};
use crate::checkpoint::{Checkpoint, ResolutionMode};
use crate::error::{CoreError, Result};
use crate::ingest::{load_nvt, Label, ManifestRecord, SampleMode};
use crate::packing::{greedy_bucket, SampleTag};
use crate::patchify::PatchSpec;
use crate::pipeline::{preprocess, PreprocessSpec};
use crate::util::{hash_label, mix_seed, shuffle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TuningMode {
    /// Backbone and head jointly optimized.
    Full,
    /// Frozen backbone; only the classification head trains.
    LinearProbe,
    /// Frozen backbone with trainable low-rank adapters plus the head.
    Lora(LoraConfig),
}

impl TuningMode {
    /// Which named tensors this mode updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        match self {
            TuningMode::Full => !name.contains(".lora_"),
            TuningMode::LinearProbe => name.starts_with("head."),
            TuningMode::Lora(_) => name.starts_with("head.") || name.contains(".lora_"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; `None` disables early stopping.
    pub patience: Option<usize>,
    pub seed: u64,
    pub resolution: ResolutionMode,
    pub frames_t: usize,
    pub target_fps: f64,
    pub max_tokens: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub patch: PatchSpec,
}

impl TrainConfig {
    /// Mode defaults: full fine-tuning runs 5 epochs at 1e-5 with batch 4;
    /// linear probing and LoRA run up to 30 epochs at 1e-4 with batch 32
    /// and stop early after 5 epochs without validation improvement.
    pub fn for_mode(mode: &TuningMode) -> Self {
        let (learning_rate, batch_size, max_epochs, patience) = match mode {
            TuningMode::Full => (1e-5, 4, 5, None),
            TuningMode::LinearProbe | TuningMode::Lora(_) => (1e-4, 32, 30, Some(5)),
        };
        TrainConfig {
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            seed: 0,
            resolution: ResolutionMode::dynamic_paper(),
            frames_t: 8,
            target_fps: 2.0,
            max_tokens: 16384,
            adam: AdamConfig::default(),
            model: ModelConfig::desk_default(),
            patch: PatchSpec::default(),
        }
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            resolution: self.resolution.clone(),
            frames_t: self.frames_t,
            target_fps: self.target_fps,
            patch: self.patch,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

/// Global average pooling over one sample's token rows, then the FC head.
pub fn classify<R: Real>(
    tape: &mut Tape<R>,
    features: NodeId,
    range: Range<usize>,
    head_w: NodeId,
    head_b: NodeId,
) -> Result<NodeId> {
    if range.is_empty() {
        return Err(CoreError::Contract(
            "classify: empty token sequence".into(),
        ));
    }
    let idx: Rc<Vec<usize>> = Rc::new(range.collect());
    let rows = tape.gather_rows(features, idx)?;
    let pooled = tape.mean_rows(rows)?;
    let logits = tape.matmul(pooled, head_w)?;
    Ok(tape.add_row(logits, head_b)?)
}

pub fn label_index(label: Label) -> usize {
    match label {
        Label::Real => 0,
        Label::Generated => 1,
    }
}

fn load_and_preprocess(
    record: &ManifestRecord,
    base_dir: &Path,
    spec: &PreprocessSpec,
    sample: SampleMode,
    seed: u64,
) -> Result<(crate::patchify::PatchSequence<f32>, SampleTag)> {
    let (video, fps) = load_nvt(&base_dir.join(&record.path))?;
    let seq = preprocess::<f32>(&video, fps, spec, sample, seed)?;
    Ok((seq, SampleTag::new(record.id.clone(), Some(record.label))))
}

struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl AdamState {
    fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
        cfg: &AdamConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads {
            let tensor = params.tensor_mut(name).expect("trainable tensor exists");
            let is_matrix = tensor.shape().len() >= 2;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut p = data[i] as f64;
                p -= lr * mhat / (vhat.sqrt() + cfg.eps);
                if is_matrix && cfg.weight_decay > 0.0 {
                    p -= lr * cfg.weight_decay * data[i] as f64;
                }
                data[i] = p as f32;
            }
        }
    }
}

/// Forward + loss over one already-packed batch. Returns the summed loss
/// and, when `accumulate` is given, adds parameter gradients into it.
fn run_pack(
    pack: &crate::packing::PackedBatch<f32>,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    mode: &TuningMode,
    loss_scale: f64,
    mut accumulate: Option<&mut BTreeMap<String, Vec<f32>>>,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let trainable: Box<dyn Fn(&str) -> bool> = if accumulate.is_some() {
        let mode = mode.clone();
        Box::new(move |name: &str| mode.is_trainable(name))
    } else {
        Box::new(|_| false)
    };
    let staged = stage_params(&mut tape, params, trainable.as_ref())?;
    let features = forward_features(&mut tape, pack, &cfg.model, &staged)?;
    let mut losses = Vec::with_capacity(pack.num_samples());
    for i in 0..pack.num_samples() {
        let label = pack.samples[i].tag.label.ok_or_else(|| {
            CoreError::Contract(format!("sample {} has no label", pack.samples[i].tag.id))
        })?;
        let logits = classify(
            &mut tape,
            features,
            pack.sample_range(i),
            staged.head_w,
            staged.head_b,
        )?;
        losses.push(tape.ce_logits2(logits, label_index(label))?);
    }
    let total = tape.add_n(&losses)?;
    let sum_loss = tape.value(total).scalar_value() as f64;
    if let Some(grads) = accumulate.as_deref_mut() {
        let scaled = tape.scale(total, loss_scale as f32);
        tape.backward(scaled)?;
        for (name, id) in &staged.leaves {
            let g = tape.grad_tensor(*id);
            let slot = grads
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (acc, &gv) in slot.iter_mut().zip(g.data()) {
                *acc += gv;
            }
        }
    }
    Ok(sum_loss)
}

fn mean_loss_over(
    records: &[ManifestRecord],
    base_dir: &Path,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    mode: &TuningMode,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let spec = cfg.preprocess_spec();
    let seqs: Vec<_> = records
        .par_iter()
        .map(|r| load_and_preprocess(r, base_dir, &spec, SampleMode::Center, 0))
        .collect::<Result<_>>()?;
    let packs = greedy_bucket(seqs, cfg.max_tokens)?;
    let mut total = 0.0;
    for pack in &packs {
        total += run_pack(pack, params, cfg, mode, 1.0, None)?;
    }
    Ok(total / records.len() as f64)
}

/// Train a detector. Randomness flows from `cfg.seed`; with a fixed seed the
/// run is bit-reproducible. Returns the checkpoint with the best validation
/// loss plus the per-epoch log.
pub fn train(
    train_set: &[ManifestRecord],
    val_set: &[ManifestRecord],
    base_dir: &Path,
    mode: &TuningMode,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<TrainLogEntry>)> {
    if train_set.is_empty() {
        return Err(CoreError::EmptySplit("training".into()));
    }
    cfg.model.validate()?;
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(CoreError::Config("batch size and epochs must be ≥ 1".into()));
    }
    let mut params = ModelParams::<f32>::init(&cfg.model, cfg.patch.flat_len(), cfg.seed)?;
    if let TuningMode::Lora(lora_cfg) = mode {
        params.attach_lora(&cfg.model, lora_cfg.clone(), mix_seed(cfg.seed, 0x10ad));
    }
    let spec = cfg.preprocess_spec();
    let mut adam = AdamState::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut epochs_since_best = 0usize;
    let started = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE000 + epoch as u64));
        shuffle(&mut rng, &mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let r = &train_set[i];
                    let seed = mix_seed(cfg.seed, mix_seed(epoch as u64, hash_label(&r.id)));
                    load_and_preprocess(r, base_dir, &spec, SampleMode::Random, seed)
                })
                .collect::<Result<_>>()?;
            let packs = greedy_bucket(seqs, cfg.max_tokens)?;
            let mut grads = BTreeMap::new();
            let scale = 1.0 / chunk.len() as f64;
            let losses: Vec<f64> = packs
                .par_iter()
                .map(|pack| run_pack_parallel(pack, &params, cfg, mode, scale))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .map(|(loss, pack_grads)| {
                    for (name, g) in pack_grads {
                        let slot = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                        for (acc, gv) in slot.iter_mut().zip(g) {
                            *acc += gv;
                        }
                    }
                    loss
                })
                .collect();
            let step_loss: f64 = losses.iter().sum();
            if !step_loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            epoch_loss += step_loss;
            adam.update(&mut params, &grads, cfg.learning_rate, &cfg.adam);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss_over(val_set, base_dir, &params, cfg, mode)?
        };
        if !val_loss.is_finite() {
            return Err(CoreError::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log.push(TrainLogEntry {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if let Some(patience) = cfg.patience {
                if epochs_since_best >= patience {
                    break;
                }
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    let ckpt = Checkpoint::from_params(
        &best_params,
        &cfg.model,
        &cfg.patch,
        &cfg.resolution,
        cfg.frames_t,
    );
    Ok((ckpt, log))
}

/// Pack-level worker: returns (summed loss, gradient map). Gradients are
/// merged by the caller in pack order so multi-threaded runs stay
/// deterministic.
fn run_pack_parallel(
    pack: &crate::packing::PackedBatch<f32>,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    mode: &TuningMode,
    scale: f64,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let mut grads = BTreeMap::new();
    let loss = run_pack(pack, params, cfg, mode, scale, Some(&mut grads))?;
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// End-to-end gradient verification
// ---------------------------------------------------------------------------

/// Finite-difference check of the whole backbone + head + loss at 64-bit.
/// Returns the worst relative error across `n_seeds` random models/inputs.
pub fn gradient_check_model(
    cfg: &ModelConfig,
    patch: &PatchSpec,
    grid: (usize, usize, usize),
    n_seeds: u64,
    step: f64,
    coords_per_tensor: Option<usize>,
) -> Result<f64> {
    use crate::ingest::VideoTensor;
    use crate::packing::pack;
    use crate::patchify::{patchify, PatchEmbedder};
    use rand::Rng;

    cfg.validate()?;
    let mut worst = 0.0f64;
    for seed in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6c));
        let (gt, gh, gw) = grid;
        let mut video = VideoTensor::zeros(gt * patch.pt, gh * patch.ph, gw * patch.pw);
        for x in video.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 255.0;
        }
        let seq = patchify::<f64>(&video, patch, &PatchEmbedder::Identity)?;
        let packed = pack(&[(seq, SampleTag::new("gc", Some(Label::Generated)))])?;
        let target = (seed % 2) as usize;

        // Randomize the norm gains away from exactly 1 so their gradient
        // paths are exercised at a generic point.
        let mut base = ModelParams::<f64>::init(cfg, patch.flat_len(), mix_seed(seed, 0x9d))?;
        {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x90));
            let names: Vec<String> = base.named_tensors().into_iter().map(|(n, _)| n).collect();
            for name in names {
                if name.contains("norm") {
                    let t = base.tensor_mut(&name).unwrap();
                    for v in t.data_mut() {
                        *v = 1.0 + 0.3 * crate::util::sample_normal(&mut rng);
                    }
                }
            }
        }
        let names: Vec<String> = base
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
            let mut tape = Tape::<f64>::new();
            let staged = stage_params(&mut tape, p, &|_| true)?;
            let features = forward_features(&mut tape, &packed, cfg, &staged)?;
            let logits = classify(
                &mut tape,
                features,
                packed.sample_range(0),
                staged.head_w,
                staged.head_b,
            )?;
            let loss = tape.ce_logits2(logits, target)?;
            Ok(tape.value(loss).scalar_value())
        };
        // analytic gradients
        let analytic: Vec<Tensor<f64>> = {
            let mut tape = Tape::<f64>::new();
            let staged = stage_params(&mut tape, &base, &|_| true)?;
            let features = forward_features(&mut tape, &packed, cfg, &staged)?;
            let logits = classify(
                &mut tape,
                features,
                packed.sample_range(0),
                staged.head_w,
                staged.head_b,
            )?;
            let loss = tape.ce_logits2(logits, target)?;
            tape.backward(loss)?;
            let by_name: BTreeMap<&str, Tensor<f64>> = staged
                .leaves
                .iter()
                .map(|(n, id)| (n.as_str(), tape.grad_tensor(*id)))
                .collect();
            names.iter().map(|n| by_name[n.as_str()].clone()).collect()
        };
        let mut flat: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let mut p = base.clone();
                p.tensor_mut(n).unwrap().clone()
            })
            .collect();
        let f = |ps: &[Tensor<f64>]| -> f64 {
            let mut p = base.clone();
            for (n, t) in names.iter().zip(ps) {
                *p.tensor_mut(n).unwrap() = t.clone();
            }
            loss_of(&p).expect("forward succeeds")
        };
        let err = nvf_tensor::finite_diff_check(
            f,
            &mut flat,
            &analytic,
            step,
            coords_per_tensor,
            mix_seed(seed, 0xfd),
        );
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{save_nvt, Split, VideoTensor};
    use rand::Rng;
    use std::path::PathBuf;

    fn write_toy_corpus(dir: &Path, n_per_class: usize) -> (Vec<ManifestRecord>, PathBuf) {
        // constant-brightness videos: reals dark, fakes bright — linearly
        // separable after pooling
        let mut records = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for i in 0..n_per_class * 2 {
            let generated = i % 2 == 1;
            let base = if generated { 0.8 } else { 0.2 };
            let mut v = VideoTensor::zeros(2, 14, 14);
            for x in v.data_mut() {
                *x = (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0);
            }
            let name = format!("toy_{i}.nvt");
            save_nvt(&dir.join(&name), &v, 2.0).unwrap();
            records.push(ManifestRecord {
                id: format!("toy_{i}"),
                path: name,
                label: if generated { Label::Generated } else { Label::Real },
                generator: if generated { "toygen".into() } else { "real".into() },
                split: Split::Train,
                width: 14,
                height: 14,
                fps: 2.0,
                frames: 2,
                quality: None,
            });
        }
        (records, dir.to_path_buf())
    }

    fn toy_train_config(mode: &TuningMode) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.model = ModelConfig::sized(2, 16, 2);
        cfg.model.window_side = 4;
        cfg.patch = PatchSpec::default();
        cfg.resolution = ResolutionMode::Dynamic {
            min_pixels: 14 * 14,
            max_pixels: 64 * 64,
        };
        cfg.frames_t = 2;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn default_learning_rates_match_mode() {
        assert_eq!(TrainConfig::for_mode(&TuningMode::Full).learning_rate, 1e-5);
        assert_eq!(
            TrainConfig::for_mode(&TuningMode::LinearProbe).learning_rate,
            1e-4
        );
        assert_eq!(
            TrainConfig::for_mode(&TuningMode::Lora(LoraConfig::default())).learning_rate,
            1e-4
        );
        assert_eq!(TrainConfig::for_mode(&TuningMode::Full).batch_size, 4);
        assert_eq!(TrainConfig::for_mode(&TuningMode::Full).max_epochs, 5);
        assert_eq!(
            TrainConfig::for_mode(&TuningMode::LinearProbe).patience,
            Some(5)
        );
    }

    #[test]
    fn classify_invariances() {
        let mut tape = Tape::<f64>::new();
        let feats = tape.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        // N=1 pooling is the identity on that token
        let one = classify(&mut tape, feats, 0..1, w, b).unwrap();
        // duplicating every token leaves logits unchanged (rows are equal)
        let two = classify(&mut tape, feats, 0..2, w, b).unwrap();
        assert!(tape.value(one).max_abs_diff(tape.value(two)) < 1e-15);
        // zero head weights → logits = bias
        let zw = tape.constant(Tensor::zeros(&[4, 2]));
        let zb = classify(&mut tape, feats, 0..2, zw, b).unwrap();
        assert_eq!(tape.value(zb).data(), &[0.5, -0.5]);
        // empty sequence is a contract error
        assert!(classify(&mut tape, feats, 0..0, w, b).is_err());
    }

    #[test]
    fn loss_decreases_monotonically_on_separable_toy_set() {
        // convex head-only problem, full-batch updates
        let dir = tempfile::tempdir().unwrap();
        let (records, base) = write_toy_corpus(dir.path(), 10);
        let mode = TuningMode::LinearProbe;
        let mut cfg = toy_train_config(&mode);
        cfg.batch_size = records.len();
        cfg.max_epochs = 10;
        cfg.patience = None;
        cfg.learning_rate = 1e-3;
        let (_, log) = train(&records, &[], &base, &mode, &cfg).unwrap();
        assert_eq!(log.len(), 10);
        for w in log.windows(2) {
            assert!(
                w[1].train_loss <= w[0].train_loss + 1e-9,
                "loss rose: {} → {}",
                w[0].train_loss,
                w[1].train_loss
            );
        }
    }

    #[test]
    fn linear_probe_touches_only_the_head() {
        let dir = tempfile::tempdir().unwrap();
        let (records, base) = write_toy_corpus(dir.path(), 4);
        let mode = TuningMode::LinearProbe;
        let mut cfg = toy_train_config(&mode);
        cfg.max_epochs = 2;
        cfg.patience = None;
        let (ckpt, _) = train(&records, &[], &base, &mode, &cfg).unwrap();
        let init = ModelParams::<f32>::init(&cfg.model, cfg.patch.flat_len(), cfg.seed).unwrap();
        for (name, tensor) in init.named_tensors() {
            let trained = &ckpt.tensors[&name];
            if name.starts_with("head.") {
                assert_ne!(trained.data(), tensor.data(), "{name} should have moved");
            } else {
                assert_eq!(trained.data(), tensor.data(), "{name} must stay frozen");
            }
        }
    }

    #[test]
    fn lora_mode_freezes_base_and_moves_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let (records, base) = write_toy_corpus(dir.path(), 4);
        let mode = TuningMode::Lora(LoraConfig {
            rank: 2,
            alpha: 2.0,
            targets: vec![crate::backbone::LoraTarget::Query, crate::backbone::LoraTarget::Value],
        });
        let mut cfg = toy_train_config(&mode);
        cfg.max_epochs = 2;
        cfg.patience = None;
        let (ckpt, _) = train(&records, &[], &base, &mode, &cfg).unwrap();
        let init = ModelParams::<f32>::init(&cfg.model, cfg.patch.flat_len(), cfg.seed).unwrap();
        for (name, tensor) in init.named_tensors() {
            if name.starts_with("head.") {
                continue; // the head trains alongside the adapters
            }
            let trained = &ckpt.tensors[&name];
            assert_eq!(trained.data(), tensor.data(), "{name} must stay frozen");
        }
        let moved = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| n.contains(".lora_b"))
            .any(|(_, t)| t.data().iter().any(|&v| v != 0.0));
        assert!(moved, "some adapter B should have left zero");
    }

    #[test]
    fn lora_with_zero_b_predicts_like_base() {
        use crate::pipeline::predict;
        let cfg = ModelConfig::sized(2, 16, 2);
        let patch = PatchSpec::new(2, 7, 7).unwrap();
        let resolution = ResolutionMode::Dynamic {
            min_pixels: 14 * 14,
            max_pixels: 64 * 64,
        };
        let base_params = ModelParams::<f32>::init(&cfg, patch.flat_len(), 5).unwrap();
        let base_ckpt = Checkpoint::from_params(&base_params, &cfg, &patch, &resolution, 2);
        let mut lora_params = base_params.clone();
        lora_params.attach_lora(&cfg, LoraConfig::default(), 99);
        let lora_ckpt = Checkpoint::from_params(&lora_params, &cfg, &patch, &resolution, 2);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut video = VideoTensor::zeros(4, 28, 28);
        for x in video.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 255.0;
        }
        let a = predict(&video, 2.0, &base_ckpt, None).unwrap();
        let b = predict(&video, 2.0, &lora_ckpt, None).unwrap();
        assert_eq!(a, b, "B=0 adapters must not change the function");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (records, base) = write_toy_corpus(dir.path(), 4);
        let mode = TuningMode::Full;
        let mut cfg = toy_train_config(&mode);
        cfg.max_epochs = 2;
        cfg.learning_rate = 1e-3;
        let (c1, l1) = train(&records, &[], &base, &mode, &cfg).unwrap();
        let (c2, l2) = train(&records, &[], &base, &mode, &cfg).unwrap();
        for (name, t) in &c1.tensors {
            assert_eq!(t.data(), c2.tensors[name].data(), "{name}");
        }
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.train_loss, b.train_loss);
        }
    }

    #[test]
    fn loss_examples() {
        // equal logits → ln 2; growing margin → loss → 0 monotonically
        let mut tape = Tape::<f64>::new();
        let eq = tape.constant(Tensor::new(vec![1, 2], vec![1.3, 1.3]).unwrap());
        let l = tape.ce_logits2(eq, 0).unwrap();
        assert!((tape.value(l).scalar_value() - 2.0f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let z = tape
                .constant(Tensor::new(vec![1, 2], vec![0.0, margin]).unwrap());
            let node = tape.ce_logits2(z, 1).unwrap();
            let val = tape.value(node).scalar_value();
            assert!(val < prev || (val == 0.0 && prev == 0.0));
            prev = val;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let mode = TuningMode::Full;
        let cfg = toy_train_config(&mode);
        let err = train(&[], &[], Path::new("."), &mode, &cfg).unwrap_err();
        assert!(matches!(err, CoreError::EmptySplit(_)), "{err}");
    }
}
