//! Acceptance suite. Every test prints one pass line (visible with
//! `--nocapture`); failures carry the measured values. The heavier
//! detection experiments build their corpora in per-test temp directories;
//! the default corpus is shared.

use std::sync::OnceLock;
use std::time::Instant;

use nvf_core::backbone::{LoraConfig, ModelConfig, ModelParams};
use nvf_core::checkpoint::ResolutionMode;
use nvf_core::crossval::{
    build_matrix, correlation_report, distance, nmds, pearson, stress1, CrossValMatrix,
};
use nvf_core::ingest::{
    smart_resize, DatasetManifest, Label, ResolutionPolicy, Split, VideoTensor,
};
use nvf_core::metrics::{self, accuracy, auc, average_precision, balanced_accuracy, f1, recall};
use nvf_core::packing::{pack, unpack, SampleTag};
use nvf_core::patchify::{patchify, unpatchify, PatchEmbedder, PatchSequence, PatchSpec};
use nvf_core::robustness::{self, jpeg_like, Perturbation};
use nvf_core::synthdata::{build_corpus, CorpusConfig};
use nvf_core::train::{gradient_check_model, train, TrainConfig, TuningMode};
use nvf_tensor::{rope2d_apply, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(n: u32, name: &str, detail: String) {
    println!("[acceptance] criterion {n} ({name}): PASS — {detail}");
}

// ---------------------------------------------------------------------------
// shared fixtures
// ---------------------------------------------------------------------------

struct Corpus {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
}

fn default_corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let manifest = build_corpus(&CorpusConfig::default_desk(5), dir.path()).expect("corpus");
        Corpus {
            _dir: dir,
            manifest,
        }
    })
}

fn random_video(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoTensor {
    let mut v = VideoTensor::zeros(t, h, w);
    for x in v.data_mut() {
        *x = rng.random_range(0..256u32) as f32 / 255.0;
    }
    v
}

fn ablation_train_config(mode: &TuningMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.seed = seed;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 5;
    cfg.patience = None;
    cfg.max_tokens = 2048;
    cfg.resolution = ResolutionMode::Dynamic {
        min_pixels: 96 * 96,
        max_pixels: 192 * 192,
    };
    cfg.model = ModelConfig::sized(2, 32, 4);
    cfg.model.window_side = 8;
    cfg.patch = PatchSpec::default();
    cfg
}

fn train_and_eval(manifest: &DatasetManifest, mode: &TuningMode, cfg: &TrainConfig) -> f64 {
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let val_set: Vec<_> = manifest.split(Split::Val).cloned().collect();
    let (ckpt, _) = train(&train_set, &val_set, &manifest.base_dir, mode, cfg).expect("training");
    metrics::evaluate(&ckpt, manifest, Split::Test, 0.5)
        .expect("evaluation")
        .overall_acc
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let mut cfg = ModelConfig::sized(2, 32, 4);
    cfg.window_side = 4;
    let patch = PatchSpec::new(1, 2, 2).unwrap();
    // (2,4,8) patch grid → 64 tokens
    let worst = gradient_check_model(&cfg, &patch, (2, 4, 8), 20, 1e-4, Some(20)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst <= 1e-4, "max relative error {worst:e} > 1e-4");
    assert!(elapsed < 120.0, "gradient check took {elapsed:.0}s ≥ 2 min");
    pass(
        1,
        "gradient fidelity",
        format!("max rel err {worst:.2e} over 20 seeds in {elapsed:.0}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Packing equivalence
// ---------------------------------------------------------------------------

fn packing_equivalence_case<R: nvf_tensor::Real>(seed: u64, tol: f64) -> f64 {
    let mut cfg = ModelConfig::sized(2, 16, 2);
    cfg.window_side = 2;
    let spec = PatchSpec::new(1, 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5usize);
    let seqs: Vec<(PatchSequence<R>, SampleTag)> = (0..n)
        .map(|i| {
            let t = rng.random_range(1..3usize);
            let h = 2 * rng.random_range(1..7usize);
            let w = 2 * rng.random_range(1..7usize);
            let v = random_video(&mut rng, t, h, w);
            (
                patchify::<R>(&v, &spec, &PatchEmbedder::Identity).unwrap(),
                SampleTag::new(format!("s{i}"), None),
            )
        })
        .collect();
    let params = ModelParams::<R>::init(&cfg, spec.flat_len(), seed ^ 0xace).unwrap();
    let packed = pack(&seqs).unwrap();
    let together = forward_packed(&packed, &cfg, &params);
    let blocks = unpack(&together, &packed.boundaries).unwrap();
    let mut worst = 0.0f64;
    for (i, (seq, tag)) in seqs.iter().enumerate() {
        let single = pack(&[(seq.clone(), tag.clone())]).unwrap();
        let alone = forward_packed(&single, &cfg, &params);
        let diff = alone.max_abs_diff(&blocks[i]);
        assert!(diff <= tol, "seed {seed} sample {i}: diff {diff} > {tol}");
        worst = worst.max(diff);
    }
    worst
}

fn forward_packed<R: nvf_tensor::Real>(
    packed: &nvf_core::packing::PackedBatch<R>,
    cfg: &ModelConfig,
    params: &ModelParams<R>,
) -> Tensor<R> {
    use nvf_core::backbone::{forward_features, stage_params};
    let mut tape = nvf_tensor::Tape::<R>::new();
    let staged = stage_params(&mut tape, params, &|_| false).unwrap();
    let out = forward_features(&mut tape, packed, cfg, &staged).unwrap();
    tape.value(out).clone()
}

#[test]
fn criterion_02_packing_equivalence() {
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for seed in 0..50u64 {
        worst32 = worst32.max(packing_equivalence_case::<f32>(seed, 1e-6));
        worst64 = worst64.max(packing_equivalence_case::<f64>(seed + 1000, 1e-10));
    }
    pass(
        2,
        "packing equivalence",
        format!("50 sets per precision; worst diff f32 {worst32:.2e}, f64 {worst64:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 3. RoPE relativity
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_rope_relativity() {
    let heads = 4;
    let dim = 32;
    let window = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_logit = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..20 {
        let n = 6;
        let q = Tensor::<f64>::new(
            vec![n, dim],
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let k = Tensor::<f64>::new(
            vec![n, dim],
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let coords: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..30), rng.random_range(0..30)))
            .collect();
        let (sh, sw) = (
            window * rng.random_range(1..5usize),
            window * rng.random_range(1..5usize),
        );
        let shifted: Vec<(usize, usize)> = coords.iter().map(|&(h, w)| (h + sh, w + sw)).collect();
        let logits = |coords: &[(usize, usize)]| -> Vec<f64> {
            let qr = rope2d_apply(&q, coords, heads, 10000.0);
            let kr = rope2d_apply(&k, coords, heads, 10000.0);
            let hd = dim / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut out = Vec::new();
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        for c in 0..hd {
                            s += qr.data()[i * dim + h * hd + c] * kr.data()[j * dim + h * hd + c];
                        }
                        out.push(s * scale);
                    }
                }
            }
            out
        };
        let base = logits(&coords);
        let moved = logits(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            worst_logit = worst_logit.max((a - b).abs());
        }
        // rotation preserves the norm of every channel pair
        let qr = rope2d_apply(&q, &coords, heads, 10000.0);
        let hd = dim / heads;
        for tok in 0..n {
            for h in 0..heads {
                for pair in 0..hd / 2 {
                    let i0 = tok * dim + h * hd + 2 * pair;
                    let before = (q.data()[i0].powi(2) + q.data()[i0 + 1].powi(2)).sqrt();
                    let after = (qr.data()[i0].powi(2) + qr.data()[i0 + 1].powi(2)).sqrt();
                    worst_norm = worst_norm.max((before - after).abs());
                }
            }
        }
    }
    assert!(worst_logit <= 1e-9, "logit drift {worst_logit:e}");
    assert!(worst_norm <= 1e-12, "pair norm drift {worst_norm:e}");
    pass(
        3,
        "RoPE relativity",
        format!("logit drift {worst_logit:.2e}, pair-norm drift {worst_norm:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Patchify
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_patchify() {
    let spec = PatchSpec::new(2, 7, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..10 {
        let t = 2 * rng.random_range(1..4usize);
        let h = 7 * rng.random_range(1..6usize);
        let w = 7 * rng.random_range(1..6usize);
        let v = random_video(&mut rng, t, h, w);
        let seq = patchify::<f32>(&v, &spec, &PatchEmbedder::Identity).unwrap();
        assert_eq!(seq.len(), (t / 2) * (h / 7) * (w / 7), "token formula");
        let back = unpatchify(&seq, &spec).unwrap();
        assert_eq!(back, v, "case {case}: round trip not bit-exact");
    }
    // linearity at 64-bit with dyadic inputs so the f32 mix is exact
    let dyadic = |rng: &mut ChaCha8Rng| {
        let mut v = VideoTensor::zeros(2, 14, 14);
        for x in v.data_mut() {
            *x = rng.random_range(0..256u32) as f32 / 256.0;
        }
        v
    };
    let v1 = dyadic(&mut rng);
    let v2 = dyadic(&mut rng);
    let e = Tensor::<f64>::new(
        vec![spec.flat_len(), 5],
        (0..spec.flat_len() * 5)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let mut mixed = VideoTensor::zeros(2, 14, 14);
    for i in 0..mixed.data().len() {
        mixed.data_mut()[i] = 0.25 * v1.data()[i] + 0.5 * v2.data()[i];
    }
    let emb = PatchEmbedder::matrix(e);
    let sm = patchify::<f64>(&mixed, &spec, &emb).unwrap();
    let s1 = patchify::<f64>(&v1, &spec, &emb).unwrap();
    let s2 = patchify::<f64>(&v2, &spec, &emb).unwrap();
    let mut worst = 0.0f64;
    for i in 0..sm.tokens.numel() {
        let lin = 0.25 * s1.tokens.data()[i] + 0.5 * s2.tokens.data()[i];
        worst = worst.max((lin - sm.tokens.data()[i]).abs());
    }
    assert!(worst <= 1e-10, "linearity error {worst:e}");
    pass(
        4,
        "patchify",
        format!("10 bit-exact round trips; linearity error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 5. smart_resize
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_smart_resize() {
    let policy = ResolutionPolicy::paper_default();
    assert_eq!(smart_resize(1088, 1920, &policy).unwrap(), (532, 952));
    assert_eq!(smart_resize(480, 832, &policy).unwrap(), (476, 826));
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..1000 {
        let h = rng.random_range(64..2600usize);
        let aspect = rng.random_range(1..8usize);
        let (h, w) = if rng.random_range(0..2u32) == 0 {
            (h, (h * aspect).min(4000))
        } else {
            ((h * aspect).min(4000), h)
        };
        let (nh, nw) = smart_resize(h, w, &policy)
            .unwrap_or_else(|e| panic!("case {case} ({h}x{w}): {e}"));
        assert_eq!(nh % 14, 0, "case {case}");
        assert_eq!(nw % 14, 0, "case {case}");
        assert!(
            nh * nw >= policy.min_pixels && nh * nw <= policy.max_pixels,
            "case {case}: {nh}x{nw} out of budget"
        );
    }
    pass(
        5,
        "smart_resize",
        "1000 random shapes in budget and patch-aligned; both derived examples exact".into(),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_metric_oracles() {
    use Label::{Generated as G, Real as R};
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for case in 0..200 {
        let n = rng.random_range(2..=100usize);
        let mut scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..40u32) as f64 / 40.0)
            .collect();
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if rng.random_range(0..2u32) == 1 { G } else { R })
            .collect();
        labels[0] = G;
        scores[0] = 0.93;
        if n > 1 {
            labels[1] = R;
            scores[1] = 0.11;
        }
        // exhaustive confusion-matrix / pair-loop oracles
        let (mut tp, mut fp, mut tn, mut fm) = (0.0f64, 0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(&labels) {
            match (s >= 0.5, l) {
                (true, G) => tp += 1.0,
                (true, R) => fp += 1.0,
                (false, R) => tn += 1.0,
                (false, G) => fm += 1.0,
            }
        }
        let acc = accuracy(&scores, &labels, 0.5).unwrap();
        assert!((acc - 100.0 * (tp + tn) / n as f64).abs() < 1e-9, "case {case}");
        let rec = recall(&scores, &labels, 0.5).unwrap();
        assert!((rec - 100.0 * tp / (tp + fm)).abs() < 1e-9);
        let f = f1(&scores, &labels, 0.5).unwrap();
        let ef = if 2.0 * tp + fp + fm == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * tp / (2.0 * tp + fp + fm)
        };
        assert!((f - ef).abs() < 1e-9);
        let b = balanced_accuracy(&scores, &labels, 0.5).unwrap();
        assert!((b - 100.0 * (tp / (tp + fm) + tn / (tn + fp)) / 2.0).abs() < 1e-9);
        let mut correct = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            if labels[i] != G {
                continue;
            }
            for j in 0..n {
                if labels[j] != R {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    correct += 1.0;
                } else if scores[i] == scores[j] {
                    correct += 0.5;
                }
            }
        }
        assert!((auc(&scores, &labels).unwrap() - 100.0 * correct / pairs).abs() < 1e-9);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let (mut hits, mut ap_sum) = (0.0f64, 0.0f64);
        for (rank0, &i) in order.iter().enumerate() {
            if labels[i] == G {
                hits += 1.0;
                ap_sum += hits / (rank0 + 1) as f64;
            }
        }
        let n_pos = labels.iter().filter(|&&l| l == G).count() as f64;
        assert!(
            (average_precision(&scores, &labels).unwrap() - 100.0 * ap_sum / n_pos).abs() < 1e-9
        );
        // monotone-transform invariance of the rank statistics
        if labels.iter().any(|&l| l == R) {
            let transformed: Vec<f64> = scores.iter().map(|s| s.powi(3) * 0.7 + 0.3 * s).collect();
            assert!(
                (average_precision(&scores, &labels).unwrap()
                    - average_precision(&transformed, &labels).unwrap())
                .abs()
                    < 1e-9
            );
            assert!(
                (auc(&scores, &labels).unwrap() - auc(&transformed, &labels).unwrap()).abs() < 1e-9
            );
        }
    }
    pass(
        6,
        "metric oracles",
        "200 instances match brute force ≤1e-9; AP/AUC rank-invariant".into(),
    );
}

// ---------------------------------------------------------------------------
// 7. Cross-validation analysis machinery
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_crossval_analysis() {
    // reported cross-recall pair: d = 1 − ½(0.974 + 0.939) = 0.0435
    let m = CrossValMatrix::new(
        vec!["a".into(), "b".into()],
        vec![vec![99.7, 97.4], vec![93.9, 99.4]],
    )
    .unwrap();
    let d = distance(&m).unwrap();
    assert!((d[0][1] - 0.0435).abs() <= 1e-12, "distance {}", d[0][1]);

    // planar recovery
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pts: Vec<(f64, f64)> = (0..6)
        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let mut dist = vec![vec![0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            dist[i][j] =
                ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
        }
    }
    let names: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
    let emb = nmds(&dist, &names, 7, 500, 1e-12, 8).unwrap();
    assert!(emb.stress < 0.01, "stress {}", emb.stress);
    for w in emb.stress_log.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "stress increased: {} → {}", w[0], w[1]);
    }
    // stress is invariant under isometries of the embedding
    let disp = {
        let mut d = vec![vec![0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                d[i][j] = ((emb.points[i].0 - emb.points[j].0).powi(2)
                    + (emb.points[i].1 - emb.points[j].1).powi(2))
                .sqrt();
            }
        }
        d
    };
    let rotated: Vec<(f64, f64)> = emb
        .points
        .iter()
        .map(|&(x, y)| {
            let t: f64 = 1.1;
            (x * t.cos() - y * t.sin() + 2.0, -(x * t.sin() + y * t.cos()) - 0.5)
        })
        .collect();
    assert!((stress1(&emb.points, &disp) - stress1(&rotated, &disp)).abs() < 1e-9);

    // Pearson affine invariance
    let x = [0.4, 1.8, 0.9, 3.2, 2.4];
    let y = [1.0, 0.7, 2.1, 2.9, 1.4];
    let base = pearson(&x, &y).unwrap();
    let xs: Vec<f64> = x.iter().map(|v| 5.0 * v + 3.0).collect();
    let ys: Vec<f64> = y.iter().map(|v| 0.1 * v - 9.0).collect();
    assert!((pearson(&xs, &ys).unwrap() - base).abs() <= 1e-12);
    pass(
        7,
        "cross-validation analysis",
        format!("distance 0.0435 exact; planar stress {:.2e}; Pearson affine-invariant", emb.stress),
    );
}

// ---------------------------------------------------------------------------
// 8. Desk-scale detection
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_desk_scale_detection() {
    let started = Instant::now();
    let corpus = default_corpus();
    let mode = TuningMode::Full;
    let mut cfg = ablation_train_config(&mode, 7);
    cfg.model = ModelConfig::sized(4, 64, 4);
    cfg.model.window_side = 8;
    cfg.frames_t = 8;
    cfg.max_epochs = 5;
    let acc = train_and_eval(&corpus.manifest, &mode, &cfg);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(acc >= 90.0, "held-out ACC {acc:.2} < 90");
    assert!(elapsed <= 900.0, "training took {elapsed:.0}s > 15 min");
    pass(
        8,
        "desk-scale detection",
        format!("ACC {acc:.2}% after 5 epochs in {elapsed:.0}s"),
    );
}

// ---------------------------------------------------------------------------
// 9. Table-6 direction: spatial resolution
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_resolution_direction() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_corpus(&CorpusConfig::high_res_artifacts(5), dir.path()).unwrap();
    let mode = TuningMode::Full;
    let arm = |resolution: ResolutionMode| {
        let mut cfg = ablation_train_config(&mode, 7);
        cfg.frames_t = 2;
        cfg.max_epochs = 10;
        cfg.max_tokens = 4096;
        cfg.resolution = resolution;
        train_and_eval(&manifest, &mode, &cfg)
    };
    let crop = arm(ResolutionMode::Crop224);
    let resize = arm(ResolutionMode::Resize224);
    let dyn448 = arm(ResolutionMode::Dynamic {
        min_pixels: 224 * 224,
        max_pixels: 448 * 448,
    });
    let dyn720 = arm(ResolutionMode::Dynamic {
        min_pixels: 224 * 224,
        max_pixels: 720 * 720,
    });
    let detail =
        format!("crop {crop:.1} < resize {resize:.1} < dyn448 {dyn448:.1} ≤ dyn720 {dyn720:.1}");
    assert!(crop < resize, "{detail}");
    assert!(resize < dyn448, "{detail}");
    assert!(dyn448 <= dyn720, "{detail}");
    assert!(dyn448 - crop >= 5.0 && dyn720 - crop >= 5.0, "{detail}");
    pass(9, "resolution direction", detail);
}

// ---------------------------------------------------------------------------
// 10. Table-6 direction: temporal resolution
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_temporal_direction() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_corpus(&CorpusConfig::flicker_dominant(5), dir.path()).unwrap();
    let mode = TuningMode::Full;
    let arm = |frames_t: usize| {
        let mut cfg = ablation_train_config(&mode, 7);
        cfg.frames_t = frames_t;
        cfg.max_epochs = 5;
        train_and_eval(&manifest, &mode, &cfg)
    };
    let t2 = arm(2);
    let t4 = arm(4);
    let t8 = arm(8);
    let detail = format!("T=2 {t2:.1} ≤ T=4 {t4:.1} ≤ T=8 {t8:.1}");
    assert!(t8 >= t4 && t4 >= t2, "{detail}");
    pass(10, "temporal direction", detail);
}

// ---------------------------------------------------------------------------
// 11. Table-6 direction: tuning mode
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_tuning_direction() {
    let corpus = default_corpus();
    let lp_mode = TuningMode::LinearProbe;
    let mut lp_cfg = ablation_train_config(&lp_mode, 7);
    lp_cfg.learning_rate = 1e-2;
    let lp = train_and_eval(&corpus.manifest, &lp_mode, &lp_cfg);

    let lora_mode = TuningMode::Lora(LoraConfig::default());
    let mut lora_cfg = ablation_train_config(&lora_mode, 7);
    lora_cfg.learning_rate = 2e-3;
    let lora = train_and_eval(&corpus.manifest, &lora_mode, &lora_cfg);

    let full_mode = TuningMode::Full;
    let full_cfg = ablation_train_config(&full_mode, 7);
    let full = train_and_eval(&corpus.manifest, &full_mode, &full_cfg);

    let detail = format!("LP {lp:.1} ≤ LoRA(r=16) {lora:.1} ≤ full {full:.1}");
    assert!(full >= lora && lora >= lp, "{detail}");
    pass(11, "tuning direction", detail);
}

// ---------------------------------------------------------------------------
// 12. Quality ↔ cross-recall correlation
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_quality_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_corpus(&CorpusConfig::quality_ladder(5), dir.path()).unwrap();
    let mode = TuningMode::Full;
    let mut cfg = ablation_train_config(&mode, 7);
    cfg.frames_t = 4;
    let matrix = build_matrix(&manifest, &cfg, &mode).unwrap();
    assert_eq!(matrix.generators.len(), 4);
    assert!(matrix.valid.iter().all(|&v| v), "a matrix row failed to train");
    let quality: Vec<f64> = matrix
        .generators
        .iter()
        .map(|g| {
            manifest
                .records
                .iter()
                .find(|r| &r.generator == g)
                .and_then(|r| r.quality)
                .expect("profile quality recorded")
        })
        .collect();
    let report = correlation_report(&matrix, &quality).unwrap();
    assert!(
        report.rho > 0.5,
        "ρ = {:.3}; recall {:?} vs quality {:?}",
        report.rho,
        report.mean_cross_recall,
        report.quality
    );
    pass(
        12,
        "quality correlation",
        format!("ρ = {:.3} over 4 profiles", report.rho),
    );
}

// ---------------------------------------------------------------------------
// 13. Robustness protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_robustness_protocol() {
    // jpeg q=100 near-lossless on random frames
    let mut rng = ChaCha8Rng::seed_from_u64(133);
    let v = random_video(&mut rng, 2, 40, 56);
    let out = jpeg_like(&v, 100).unwrap();
    let worst = v
        .data()
        .iter()
        .zip(out.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 2.0 / 255.0, "q=100 pixel error {worst}");

    // protocol on a quickly trained tiny checkpoint
    let dir = tempfile::tempdir().unwrap();
    let mut corpus_cfg = CorpusConfig::default_desk(5);
    corpus_cfg.reals = nvf_core::synthdata::SplitCounts {
        train: 16,
        val: 4,
        test: 12,
    };
    corpus_cfg.fakes_per_profile = nvf_core::synthdata::SplitCounts {
        train: 4,
        val: 1,
        test: 3,
    };
    let manifest = build_corpus(&corpus_cfg, dir.path()).unwrap();
    let mode = TuningMode::Full;
    let mut cfg = ablation_train_config(&mode, 7);
    cfg.model = ModelConfig::sized(1, 16, 2);
    cfg.model.window_side = 8;
    cfg.max_epochs = 2;
    cfg.frames_t = 4;
    let train_set: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let (ckpt, _) = train(&train_set, &[], &manifest.base_dir, &mode, &cfg).unwrap();

    let grid = robustness::default_grid();
    let curve =
        robustness::robustness_curve(&ckpt, &manifest, Split::Test, &grid, 0.5).unwrap();
    assert_eq!(curve.len(), grid.len(), "one row per grid point");
    let identity = curve
        .iter()
        .find(|p| p.kind == "identity")
        .expect("identity point present");
    assert_eq!(identity.relative_acc, 1.0, "identity relative ACC must be exactly 1");
    let csv = robustness::curve_to_csv(&curve);
    for p in &grid {
        assert!(
            csv.contains(p.kind()),
            "curve csv missing kind {}",
            p.kind()
        );
    }
    assert!(matches!(grid[0], Perturbation::Identity));
    pass(
        13,
        "robustness protocol",
        format!(
            "identity exactly 1.0; q=100 error {worst:.5}; {} grid points emitted",
            curve.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 14. Determinism through the CLI
// ---------------------------------------------------------------------------

#[test]
fn criterion_14_determinism() {
    use std::process::Command;
    let nvf = env!("CARGO_BIN_EXE_nvf");
    let base = tempfile::tempdir().unwrap();
    let config_path = base.path().join("corpus.json");
    let corpus_cfg = {
        let mut c = CorpusConfig::default_desk(11);
        c.reals = nvf_core::synthdata::SplitCounts {
            train: 8,
            val: 4,
            test: 4,
        };
        c.fakes_per_profile = nvf_core::synthdata::SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        c
    };
    std::fs::write(&config_path, serde_json::to_vec_pretty(&corpus_cfg).unwrap()).unwrap();

    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
        let root = base.path().join(tag);
        let corpus = root.join("corpus");
        let train_out = root.join("train");
        let eval_out = root.join("eval");
        let ok = |cmd: &mut Command| {
            let out = cmd.output().unwrap();
            assert!(
                out.status.success(),
                "{:?}: {}",
                cmd,
                String::from_utf8_lossy(&out.stderr)
            );
        };
        ok(Command::new(nvf).args([
            "--seed",
            "123",
            "--threads",
            "1",
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
        ]));
        ok(Command::new(nvf).args([
            "--seed",
            "123",
            "--threads",
            "1",
            "train",
            "--manifest",
            corpus.join("manifest.jsonl").to_str().unwrap(),
            "--epochs",
            "2",
            "--layers",
            "1",
            "--dim",
            "16",
            "--heads",
            "2",
            "--frames",
            "4",
            "--lr",
            "1e-3",
            "--resolution",
            "dynamic",
            "--min-pixels",
            "9216",
            "--max-pixels",
            "36864",
            "--out",
            train_out.to_str().unwrap(),
        ]));
        ok(Command::new(nvf).args([
            "--seed",
            "123",
            "--threads",
            "1",
            "eval",
            "--checkpoint",
            train_out.join("checkpoint.nvf").to_str().unwrap(),
            "--manifest",
            corpus.join("manifest.jsonl").to_str().unwrap(),
            "--split",
            "test",
            "--out",
            eval_out.to_str().unwrap(),
        ]));
        (
            std::fs::read(corpus.join("manifest.jsonl")).unwrap(),
            std::fs::read(train_out.join("checkpoint.nvf")).unwrap(),
            std::fs::read(eval_out.join("report.json")).unwrap(),
            std::fs::read(eval_out.join("report.csv")).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.0, b.0, "manifests differ");
    assert_eq!(a.1, b.1, "checkpoints differ");
    assert_eq!(a.2, b.2, "json reports differ");
    assert_eq!(a.3, b.3, "csv reports differ");
    pass(
        14,
        "determinism",
        "synth+train+eval twice at --threads 1: manifests, checkpoints, reports byte-identical"
            .into(),
    );
}
