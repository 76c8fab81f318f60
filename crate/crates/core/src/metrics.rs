//! Evaluation suite: ACC, Recall, F1, AP, AUC, balanced ACC, per-generator
//! aggregation (mACC/mAP), and report emission. "generated" is the positive
//! class; the decision threshold is 0.5 on the softmax probability.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::ingest::{load_nvt, DatasetManifest, Label, ManifestRecord, Split};
use crate::pipeline::predict;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_nonempty(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(CoreError::Contract(format!(
            "metrics need matched non-empty inputs, got {} scores / {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fm: usize,
}

fn confusion(scores: &[f64], labels: &[Label], threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fm: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_generated = s >= threshold;
        match (predicted_generated, l) {
            (true, Label::Generated) => c.tp += 1,
            (true, Label::Real) => c.fp += 1,
            (false, Label::Real) => c.tn += 1,
            (false, Label::Generated) => c.fm += 1,
        }
    }
    c
}

/// Percent of correct decisions at the threshold.
pub fn accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    Ok(100.0 * (c.tp + c.tn) as f64 / scores.len() as f64)
}

/// Percent of generated samples detected.
pub fn recall(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    if c.tp + c.fm == 0 {
        return Err(CoreError::Contract("recall needs ≥1 positive".into()));
    }
    Ok(100.0 * c.tp as f64 / (c.tp + c.fm) as f64)
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    if c.tp + c.fm == 0 {
        return Err(CoreError::Contract("f1 needs ≥1 positive".into()));
    }
    let denom = 2 * c.tp + c.fp + c.fm;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * c.tp as f64 / denom as f64)
}

/// Mean of true-positive and true-negative rates.
pub fn balanced_accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    if c.tp + c.fm == 0 || c.tn + c.fp == 0 {
        return Err(CoreError::Contract(
            "balanced accuracy needs both classes".into(),
        ));
    }
    let tpr = c.tp as f64 / (c.tp + c.fm) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(100.0 * (tpr + tnr) / 2.0)
}

/// Step-interpolated average precision: mean over positives of the
/// precision at each positive's rank. Ties in score break by original
/// index, keeping the statistic deterministic.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Generated).count();
    if n_pos == 0 {
        return Err(CoreError::Contract(
            "average precision needs ≥1 positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == Label::Generated {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * sum / n_pos as f64)
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counted half. Computed via tied-rank sums.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Generated).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Contract("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks across ties (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == Label::Generated {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(100.0 * u / (n_pos as f64 * n_neg as f64))
}

// ---------------------------------------------------------------------------
// Per-generator evaluation report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SubsetMetrics {
    pub generator: String,
    pub fakes: usize,
    pub reals: usize,
    pub acc: Option<f64>,
    pub recall: f64,
    pub f1: Option<f64>,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub bacc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub threshold: f64,
    pub subsets: Vec<SubsetMetrics>,
    pub m_acc: Option<f64>,
    pub m_ap: Option<f64>,
    pub overall_acc: f64,
    pub overall_recall: f64,
}

impl EvalReport {
    /// Flat (subset, metric, value) rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,metric,value\n");
        let mut push = |subset: &str, metric: &str, value: Option<f64>| {
            if let Some(v) = value {
                out.push_str(&format!("{subset},{metric},{v:.4}\n"));
            }
        };
        for s in &self.subsets {
            push(&s.generator, "acc", s.acc);
            push(&s.generator, "recall", Some(s.recall));
            push(&s.generator, "f1", s.f1);
            push(&s.generator, "ap", s.ap);
            push(&s.generator, "auc", s.auc);
            push(&s.generator, "bacc", s.bacc);
        }
        push("aggregate", "m_acc", self.m_acc);
        push("aggregate", "m_ap", self.m_ap);
        push("aggregate", "overall_acc", Some(self.overall_acc));
        push("aggregate", "overall_recall", Some(self.overall_recall));
        out
    }
}

/// Compute the per-generator report from already-scored records.
/// Each generator subset is paired with an equal number of reals taken in
/// manifest order; a subset without paired reals keeps only the metrics
/// that need no negatives.
pub fn report_from_scores(
    records: &[&ManifestRecord],
    scores: &[f64],
    split: Split,
    threshold: f64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(CoreError::EmptySplit(format!("{split:?}")));
    }
    let real_indices: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == Label::Real)
        .collect();
    let mut by_generator: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.label == Label::Generated {
            by_generator.entry(r.generator.as_str()).or_default().push(i);
        }
    }
    if by_generator.is_empty() {
        return Err(CoreError::Contract(
            "evaluation split has no generated samples".into(),
        ));
    }
    let mut subsets = Vec::new();
    for (generator, fake_idx) in &by_generator {
        let paired_reals: Vec<usize> = real_indices
            .iter()
            .copied()
            .take(fake_idx.len())
            .collect();
        let idx: Vec<usize> = fake_idx.iter().chain(&paired_reals).copied().collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<Label> = idx.iter().map(|&i| records[i].label).collect();
        if paired_reals.is_empty() {
            subsets.push(SubsetMetrics {
                generator: generator.to_string(),
                fakes: fake_idx.len(),
                reals: 0,
                acc: None,
                recall: recall(&s, &l, threshold)?,
                f1: None,
                ap: None,
                auc: None,
                bacc: None,
                note: Some("no paired reals; threshold-free metrics only".into()),
            });
        } else {
            subsets.push(SubsetMetrics {
                generator: generator.to_string(),
                fakes: fake_idx.len(),
                reals: paired_reals.len(),
                acc: Some(accuracy(&s, &l, threshold)?),
                recall: recall(&s, &l, threshold)?,
                f1: Some(f1(&s, &l, threshold)?),
                ap: Some(average_precision(&s, &l)?),
                auc: Some(auc(&s, &l)?),
                bacc: Some(balanced_accuracy(&s, &l, threshold)?),
                note: None,
            });
        }
    }
    let mean_of = |f: &dyn Fn(&SubsetMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = subsets.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let m_acc = mean_of(&|s| s.acc);
    let m_ap = mean_of(&|s| s.ap);
    let all_labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let overall_acc = accuracy(scores, &all_labels, threshold)?;
    let overall_recall = recall(scores, &all_labels, threshold)?;
    Ok(EvalReport {
        split,
        threshold,
        subsets,
        m_acc,
        m_ap,
        overall_acc,
        overall_recall,
    })
}

/// Score every record of the split with the checkpoint, then build the
/// per-generator report.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    threshold: f64,
) -> Result<EvalReport> {
    let records: Vec<&ManifestRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(CoreError::EmptySplit(format!("{split:?}")));
    }
    let scores: Vec<f64> = records
        .par_iter()
        .map(|r| {
            let (video, fps) = load_nvt(&manifest.resolve(r))?;
            predict(&video, fps, ckpt, None)
        })
        .collect::<Result<_>>()?;
    report_from_scores(&records, &scores, split, threshold)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(dir.join("report.json"), json)
        .map_err(|e| CoreError::io(dir.join("report.json"), e))?;
    std::fs::write(dir.join("report.csv"), report.to_csv())
        .map_err(|e| CoreError::io(dir.join("report.csv"), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Generated as G, Real as R};

    #[test]
    fn perfect_predictions() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [G, G, R, R];
        assert_eq!(accuracy(&scores, &labels, 0.5).unwrap(), 100.0);
        assert_eq!(recall(&scores, &labels, 0.5).unwrap(), 100.0);
        assert_eq!(f1(&scores, &labels, 0.5).unwrap(), 100.0);
        assert_eq!(average_precision(&scores, &labels).unwrap(), 100.0);
        assert_eq!(auc(&scores, &labels).unwrap(), 100.0);
        assert_eq!(balanced_accuracy(&scores, &labels, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn two_sample_case() {
        let scores = [0.9, 0.2];
        let labels = [G, R];
        assert_eq!(accuracy(&scores, &labels, 0.5).unwrap(), 100.0);
        assert_eq!(recall(&scores, &labels, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn f1_zero_when_no_predicted_positives() {
        let scores = [0.1, 0.2, 0.3];
        let labels = [G, G, R];
        assert_eq!(f1(&scores, &labels, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ap_hand_case() {
        // ranking [+ at 0.9, − at 0.8, + at 0.3] → AP = (1/1 + 2/3)/2
        let scores = [0.9, 0.8, 0.3];
        let labels = [G, R, G];
        let got = average_precision(&scores, &labels).unwrap();
        assert!((got - 100.0 * (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
        assert!((got - 83.333333).abs() < 1e-3);
    }

    #[test]
    fn auc_hand_case_and_ties() {
        let scores = [0.9, 0.8, 0.3];
        let labels = [G, R, G];
        // pairs: (0.9 vs 0.8) correct, (0.3 vs 0.8) wrong → 50
        assert!((auc(&scores, &labels).unwrap() - 50.0).abs() < 1e-9);

        let tied = [0.5, 0.5, 0.5, 0.5];
        let labs = [G, R, G, R];
        assert!((auc(&tied, &labs).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn auc_requires_both_classes() {
        assert!(auc(&[0.4, 0.5], &[G, G]).is_err());
        assert!(balanced_accuracy(&[0.4, 0.5], &[G, G], 0.5).is_err());
        assert!(average_precision(&[0.4], &[R]).is_err());
    }

    #[test]
    fn bacc_all_positive_predictor_on_imbalance() {
        // 9 generated + 1 real, everything predicted generated: TPR 100, TNR 0
        let scores = [0.9; 10];
        let mut labels = [G; 10];
        labels[9] = R;
        assert_eq!(balanced_accuracy(&scores, &labels, 0.5).unwrap(), 50.0);
    }

    #[test]
    fn bacc_matches_confusion_matrix_oracle() {
        let scores = [0.9, 0.4, 0.6, 0.2, 0.7, 0.55, 0.1, 0.8];
        let labels = [G, G, R, R, G, R, G, R];
        // confusion at 0.5: TP {0.9, 0.7}, FN {0.4, 0.1}, FP {0.6, 0.55, 0.8}, TN {0.2}
        let tpr = 2.0 / 4.0;
        let tnr = 1.0 / 4.0;
        let expect = 100.0 * (tpr + tnr) / 2.0;
        assert!((balanced_accuracy(&scores, &labels, 0.5).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_are_contract_errors() {
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn correctness_is_invariant_under_joint_complement() {
        // flipping scores to 1−s and labels together preserves per-item
        // correctness on tie-free inputs
        let scores = [0.9, 0.3, 0.6, 0.2, 0.7];
        let labels = [G, G, R, R, G];
        let flipped_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped_labels: Vec<Label> = labels
            .iter()
            .map(|l| if *l == G { R } else { G })
            .collect();
        let a = accuracy(&scores, &labels, 0.5).unwrap();
        let b = accuracy(&flipped_scores, &flipped_labels, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn rec(id: &str, label: Label, generator: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            path: format!("{id}.nvt"),
            label,
            generator: generator.into(),
            split: Split::Test,
            width: 14,
            height: 14,
            fps: 2.0,
            frames: 2,
            quality: None,
        }
    }

    #[test]
    fn report_on_hand_built_manifest() {
        // 2 generators × 2 fakes + 2 shared reals; hand-checked confusion
        let records = vec![
            rec("f1", G, "gen_a"),
            rec("f2", G, "gen_a"),
            rec("f3", G, "gen_b"),
            rec("f4", G, "gen_b"),
            rec("r1", R, "real"),
            rec("r2", R, "real"),
        ];
        let refs: Vec<&ManifestRecord> = records.iter().collect();
        // gen_a: both fakes caught; gen_b: one missed. One real wrong.
        let scores = [0.9, 0.8, 0.9, 0.2, 0.1, 0.7];
        let report = report_from_scores(&refs, &scores, Split::Test, 0.5).unwrap();
        assert_eq!(report.subsets.len(), 2);
        let a = &report.subsets[0];
        assert_eq!(a.generator, "gen_a");
        // subset a: fakes {0.9,0.8} + reals {0.1,0.7} → 3/4 correct
        assert_eq!(a.acc.unwrap(), 75.0);
        assert_eq!(a.recall, 100.0);
        let b = &report.subsets[1];
        // subset b: fakes {0.9,0.2} + reals {0.1,0.7} → 2/4 correct
        assert_eq!(b.acc.unwrap(), 50.0);
        assert_eq!(b.recall, 50.0);
        assert_eq!(report.m_acc.unwrap(), 62.5);
        // overall: predictions g,g,g,r,r,g vs labels g,g,g,g,r,r → 4/6
        assert!((report.overall_acc - 100.0 * 4.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn identical_subsets_mean_to_subset_value() {
        let records = vec![
            rec("f1", G, "gen_a"),
            rec("f2", G, "gen_b"),
            rec("r1", R, "real"),
            rec("r2", R, "real"),
        ];
        let refs: Vec<&ManifestRecord> = records.iter().collect();
        let scores = [0.9, 0.9, 0.1, 0.1];
        let report = report_from_scores(&refs, &scores, Split::Test, 0.5).unwrap();
        // both subsets behave identically, so the mean equals each one
        assert_eq!(report.m_acc, report.subsets[0].acc);
    }

    #[test]
    fn subset_without_reals_is_marked() {
        let records = vec![rec("f1", G, "gen_a"), rec("f2", G, "gen_a")];
        let refs: Vec<&ManifestRecord> = records.iter().collect();
        let scores = [0.9, 0.4];
        let report = report_from_scores(&refs, &scores, Split::Test, 0.5).unwrap();
        let s = &report.subsets[0];
        assert!(s.acc.is_none() && s.ap.is_none() && s.auc.is_none());
        assert!(s.note.as_ref().unwrap().contains("threshold-free"));
        assert_eq!(s.recall, 50.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let records = vec![rec("f1", G, "gen_a"), rec("r1", R, "real")];
        let refs: Vec<&ManifestRecord> = records.iter().collect();
        let report = report_from_scores(&refs, &[0.8, 0.3], Split::Test, 0.5).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.to_csv().contains("gen_a,acc,"));
    }
}
