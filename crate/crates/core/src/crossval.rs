//! Cross-generator analysis: the n×n recall matrix from training one
//! detector per generator, the non-directional distance
//! d(i,j) = 1 − ½(M[i,j]+M[j,i]), a 2D non-metric MDS embedding (SMACOF
//! alternated with pool-adjacent-violators isotonic regression), and the
//! quality/recall Pearson correlation study.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::ingest::{load_nvt, DatasetManifest, Label, ManifestRecord, Split};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::pipeline::predict;
use crate::train::{train, TrainConfig, TuningMode};
use crate::util::{mix_seed, sample_normal};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossValMatrix {
    pub generators: Vec<String>,
    /// recall[i][j]: percent of generator j's fakes flagged by the detector
    /// trained on generator i.
    pub recall: Vec<Vec<f64>>,
    /// Rows whose training failed are marked invalid; analysis refuses them.
    pub valid: Vec<bool>,
}

impl CrossValMatrix {
    pub fn new(generators: Vec<String>, recall: Vec<Vec<f64>>) -> Result<Self> {
        let n = generators.len();
        if recall.len() != n || recall.iter().any(|r| r.len() != n) {
            return Err(CoreError::Contract(format!(
                "recall matrix must be {n}×{n}"
            )));
        }
        if recall
            .iter()
            .flatten()
            .any(|&v| !(0.0..=100.0).contains(&v))
        {
            return Err(CoreError::Contract(
                "recall entries must lie in [0,100] percent".into(),
            ));
        }
        Ok(CrossValMatrix {
            valid: vec![true; n],
            generators,
            recall,
        })
    }

    fn assert_all_valid(&self) -> Result<()> {
        if let Some(i) = self.valid.iter().position(|v| !v) {
            return Err(CoreError::Contract(format!(
                "matrix row {} ({}) is invalid; analysis refuses it",
                i, self.generators[i]
            )));
        }
        Ok(())
    }

    /// Row means excluding the diagonal — the generalization score used in
    /// the correlation study.
    pub fn mean_cross_recall(&self) -> Result<Vec<f64>> {
        self.assert_all_valid()?;
        let n = self.generators.len();
        if n < 2 {
            return Err(CoreError::Contract(
                "mean cross recall needs ≥2 generators".into(),
            ));
        }
        Ok((0..n)
            .map(|i| {
                let sum: f64 = (0..n).filter(|&j| j != i).map(|j| self.recall[i][j]).sum();
                sum / (n - 1) as f64
            })
            .collect())
    }
}

/// d(i,j) = 1 − 0.5·(M[i,j] + M[j,i]) with recalls as fractions; symmetric,
/// in [0,1], zero exactly when both directed recalls are 100%.
pub fn distance(matrix: &CrossValMatrix) -> Result<Vec<Vec<f64>>> {
    matrix.assert_all_valid()?;
    let n = matrix.generators.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mij = matrix.recall[i][j] / 100.0;
            let mji = matrix.recall[j][i] / 100.0;
            d[i][j] = 1.0 - 0.5 * (mij + mji);
        }
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Non-metric MDS
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding2D {
    pub names: Vec<String>,
    pub points: Vec<(f64, f64)>,
    /// Final Kruskal stress-1.
    pub stress: f64,
    /// Stress after each accepted iteration; non-increasing.
    pub stress_log: Vec<f64>,
}

impl Embedding2D {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,x,y\n");
        for (name, (x, y)) in self.names.iter().zip(&self.points) {
            out.push_str(&format!("{name},{x:.6},{y:.6}\n"));
        }
        out
    }
}

fn config_distances(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dx = points[i].0 - points[j].0;
            let dy = points[i].1 - points[j].1;
            let dist = (dx * dx + dy * dy).sqrt();
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    d
}

/// Kruskal stress-1 of a configuration against target disparities.
pub fn stress1(points: &[(f64, f64)], disparities: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let d = config_distances(points);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            num += (disparities[i][j] - d[i][j]).powi(2);
            den += d[i][j].powi(2);
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { 1.0 };
    }
    (num / den).sqrt()
}

/// Pool-adjacent-violators: least-squares monotone fit of `values` in the
/// given order.
fn isotonic_fit(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut level: Vec<f64> = Vec::with_capacity(n);
    let mut weight: Vec<f64> = Vec::with_capacity(n);
    let mut count: Vec<usize> = Vec::with_capacity(n);
    for &v in values {
        level.push(v);
        weight.push(v);
        count.push(1);
        while level.len() > 1 {
            let k = level.len();
            if level[k - 2] <= level[k - 1] {
                break;
            }
            let merged_weight = weight[k - 2] + weight[k - 1];
            let merged_count = count[k - 2] + count[k - 1];
            level.truncate(k - 2);
            weight.truncate(k - 2);
            count.truncate(k - 2);
            weight.push(merged_weight);
            count.push(merged_count);
            level.push(merged_weight / merged_count as f64);
        }
    }
    let mut out = Vec::with_capacity(n);
    for (lv, ct) in level.iter().zip(&count) {
        out.extend(std::iter::repeat(*lv).take(*ct));
    }
    out
}

/// Guttman transform with unit weights:
/// x_i ← (1/n) Σ_{j≠i} (d̂_ij / d_ij)(x_i − x_j).
fn guttman_step(points: &[(f64, f64)], disparities: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    let d = config_distances(points);
    let mut next = vec![(0.0, 0.0); n];
    for i in 0..n {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let ratio = if d[i][j] > 1e-12 {
                disparities[i][j] / d[i][j]
            } else {
                0.0
            };
            sx += ratio * (points[i].0 - points[j].0);
            sy += ratio * (points[i].1 - points[j].1);
        }
        next[i] = (sx / n as f64, sy / n as f64);
    }
    next
}

fn center(points: &mut [(f64, f64)]) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    for p in points.iter_mut() {
        p.0 -= mx;
        p.1 -= my;
    }
}

/// Non-metric MDS to the plane: SMACOF majorization alternating with
/// isotonic regression on the disparities, seed-controlled restarts, best
/// (lowest-stress) embedding kept, centered at the origin. A step that
/// fails to improve the logged stress is rejected and iteration stops, so
/// the per-iteration log is non-increasing by construction.
pub fn nmds(
    dissimilarities: &[Vec<f64>],
    names: &[String],
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<Embedding2D> {
    let n = dissimilarities.len();
    if n < 2 {
        return Err(CoreError::Contract("nmds needs ≥2 points".into()));
    }
    if dissimilarities.iter().any(|r| r.len() != n) {
        return Err(CoreError::Contract("dissimilarity matrix must be square".into()));
    }
    if names.len() != n {
        return Err(CoreError::Contract("one name per point required".into()));
    }
    // pair list ordered by input dissimilarity (ties keep index order)
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|&(a, b), &(c, d)| {
        dissimilarities[a][b]
            .partial_cmp(&dissimilarities[c][d])
            .expect("finite dissimilarities")
            .then((a, b).cmp(&(c, d)))
    });
    // disparities keep the input dissimilarity scale so the embedding's
    // absolute distances stay interpretable
    let scale_target: f64 = pairs
        .iter()
        .map(|&(i, j)| dissimilarities[i][j] * dissimilarities[i][j])
        .sum();

    let mut best: Option<(f64, Vec<(f64, f64)>, Vec<f64>)> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, restart as u64));
        let mut points: Vec<(f64, f64)> = (0..n)
            .map(|_| (sample_normal(&mut rng), sample_normal(&mut rng)))
            .collect();
        let mut log = Vec::new();
        let mut prev_stress = f64::INFINITY;
        let mut disparities = vec![vec![0.0; n]; n];
        for _ in 0..max_iter {
            // isotonic disparities against the rank order of dissimilarities
            let d = config_distances(&points);
            let fitted = isotonic_fit(&pairs.iter().map(|&(i, j)| d[i][j]).collect::<Vec<_>>());
            // normalize so Σ d̂² matches the pair count, keeping the scale pinned
            let ssq: f64 = fitted.iter().map(|v| v * v).sum();
            let norm = if ssq > 0.0 {
                (scale_target / ssq).sqrt()
            } else {
                1.0
            };
            for (&(i, j), &f) in pairs.iter().zip(&fitted) {
                disparities[i][j] = f * norm;
                disparities[j][i] = f * norm;
            }
            let candidate = guttman_step(&points, &disparities);
            let s = stress1(&candidate, &disparities);
            if s > prev_stress {
                break; // reject the worsening step; converged
            }
            points = candidate;
            log.push(s);
            if prev_stress - s < tol {
                break;
            }
            prev_stress = s;
        }
        let final_stress = if log.is_empty() { 1.0 } else { *log.last().unwrap() };
        if best.as_ref().map_or(true, |(b, _, _)| final_stress < *b) {
            best = Some((final_stress, points, log));
        }
    }
    let (stress, mut points, stress_log) = best.expect("≥1 restart");
    center(&mut points);
    Ok(Embedding2D {
        names: names.to_vec(),
        points,
        stress,
        stress_log,
    })
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::Contract(
            "pearson needs two equal-length series of ≥2 points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::Contract(
            "pearson undefined for zero-variance input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub generators: Vec<String>,
    pub quality: Vec<f64>,
    pub mean_cross_recall: Vec<f64>,
    pub rho: f64,
}

pub fn correlation_report(
    matrix: &CrossValMatrix,
    quality: &[f64],
) -> Result<CorrelationReport> {
    let recall = matrix.mean_cross_recall()?;
    let rho = pearson(quality, &recall)?;
    Ok(CorrelationReport {
        generators: matrix.generators.clone(),
        quality: quality.to_vec(),
        mean_cross_recall: recall,
        rho,
    })
}

// ---------------------------------------------------------------------------
// Matrix construction from the training pipeline
// ---------------------------------------------------------------------------

/// Train one detector per generator on {that generator's fakes, the shared
/// reals} and measure recall on every generator's held-out fakes. A failed
/// training invalidates its row instead of aborting the experiment.
pub fn build_matrix(
    manifest: &DatasetManifest,
    base_cfg: &TrainConfig,
    mode: &TuningMode,
) -> Result<CrossValMatrix> {
    let mut generators: Vec<String> = Vec::new();
    for r in &manifest.records {
        if r.label == Label::Generated && !generators.contains(&r.generator) {
            generators.push(r.generator.clone());
        }
    }
    if generators.is_empty() {
        return Err(CoreError::Contract("no generated subsets in manifest".into()));
    }
    let n = generators.len();
    let reals_train: Vec<ManifestRecord> = manifest
        .split(Split::Train)
        .filter(|r| r.label == Label::Real)
        .cloned()
        .collect();
    let reals_val: Vec<ManifestRecord> = manifest
        .split(Split::Val)
        .filter(|r| r.label == Label::Real)
        .cloned()
        .collect();
    let test_fakes: Vec<Vec<&ManifestRecord>> = generators
        .iter()
        .map(|g| {
            manifest
                .split(Split::Test)
                .filter(|r| r.label == Label::Generated && &r.generator == g)
                .collect()
        })
        .collect();
    if test_fakes.iter().any(|f| f.is_empty()) {
        return Err(CoreError::Contract(
            "every generator needs held-out test fakes".into(),
        ));
    }

    let mut recall = vec![vec![0.0; n]; n];
    let mut valid = vec![true; n];
    for (i, generator) in generators.iter().enumerate() {
        let fakes_train: Vec<ManifestRecord> = manifest
            .split(Split::Train)
            .filter(|r| r.label == Label::Generated && &r.generator == generator)
            .cloned()
            .collect();
        // shared reals sized to the fake subset
        let mut train_set: Vec<ManifestRecord> = fakes_train.clone();
        train_set.extend(reals_train.iter().take(fakes_train.len()).cloned());
        let fakes_val: Vec<ManifestRecord> = manifest
            .split(Split::Val)
            .filter(|r| r.label == Label::Generated && &r.generator == generator)
            .cloned()
            .collect();
        let mut val_set = fakes_val.clone();
        val_set.extend(reals_val.iter().take(fakes_val.len()).cloned());

        let mut cfg = base_cfg.clone();
        cfg.seed = mix_seed(base_cfg.seed, 0xc0 + i as u64);
        match train(&train_set, &val_set, &manifest.base_dir, mode, &cfg) {
            Ok((ckpt, _log)) => {
                for (j, fakes) in test_fakes.iter().enumerate() {
                    recall[i][j] = recall_on(&ckpt, manifest, fakes)?;
                }
            }
            Err(_) => valid[i] = false,
        }
    }
    Ok(CrossValMatrix {
        generators,
        recall,
        valid,
    })
}

fn recall_on(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    fakes: &[&ManifestRecord],
) -> Result<f64> {
    use rayon::prelude::*;
    let hits: usize = fakes
        .par_iter()
        .map(|r| {
            let (video, fps) = load_nvt(&manifest.resolve(r))?;
            let score = predict(&video, fps, ckpt, None)?;
            Ok(usize::from(score >= DEFAULT_THRESHOLD))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(100.0 * hits as f64 / fakes.len() as f64)
}

pub fn write_analysis(
    dir: &Path,
    matrix: &CrossValMatrix,
    embedding: &Embedding2D,
    correlation: Option<&CorrelationReport>,
) -> Result<()> {
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        std::fs::write(dir.join(name), bytes).map_err(|e| CoreError::io(dir.join(name), e))
    };
    write("matrix.json", serde_json::to_vec_pretty(matrix)?)?;
    write("embedding.json", serde_json::to_vec_pretty(embedding)?)?;
    write("embedding.csv", embedding.to_csv().into_bytes())?;
    if let Some(c) = correlation {
        write("correlation.json", serde_json::to_vec_pretty(c)?)?;
    }
    Ok(())
}

/// Import an externally produced recall matrix (percent values) for
/// re-analysis: {"generators": [...], "recall": [[...]]}.
pub fn load_matrix(path: &Path) -> Result<CrossValMatrix> {
    #[derive(Deserialize)]
    struct Raw {
        generators: Vec<String>,
        recall: Vec<Vec<f64>>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let raw: Raw = serde_json::from_str(&text)?;
    CrossValMatrix::new(raw.generators, raw.recall)
}
