//! Evaluation metrics: accuracy, macro F1, quadratic weighted kappa, macro
//! one-vs-rest AUC, and sensitivity/specificity operating points on the
//! binarized "significant" tasks.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};
use crate::poisson::{ClassLabel, ProbVector};

/// `K×K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        check_same_len(truth.len(), predicted.len())?;
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(PonError::invalid(format!(
                    "label pair ({t}, {p}) out of range for {num_classes} classes"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|row| row.len() != k) {
            return Err(PonError::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PonError::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(PonError::invalid("accuracy of an empty confusion matrix"));
    }
    let trace: u64 = (0..cm.num_classes()).map(|k| cm.counts[k][k]).sum();
    Ok(trace as f64 / total as f64)
}

/// Unweighted mean of per-class F1; a class with `0/0` precision and recall scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.num_classes();
    if cm.total() == 0 || k == 0 {
        return Err(PonError::invalid("F1 of an empty confusion matrix"));
    }
    let mut sum = 0.0;
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        // 2PR/(P+R) = 2tp / (predicted + actual)
        let denom = (predicted + actual) as f64;
        if denom == 0.0 {
            warn!("class {c} never true and never predicted; its F1 is taken as 0");
            continue;
        }
        sum += 2.0 * tp / denom;
    }
    Ok(sum / k as f64)
}

/// Quadratic weighted kappa.
///
/// Evaluated in integer arithmetic as `1 − n·Σ w'O / Σ w' r_i c_j` with
/// `w' = (i − j)²`, which equals the usual normalized-weight form.
#[allow(clippy::needless_range_loop)]
pub fn qwk(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(PonError::invalid("kappa of empty label lists"));
    }
    let cm = ConfusionMatrix::from_labels(truth, predicted, num_classes)?;
    let k = num_classes;
    let rows: Vec<u128> = (0..k)
        .map(|i| cm.counts[i].iter().map(|&c| c as u128).sum())
        .collect();
    let cols: Vec<u128> = (0..k)
        .map(|j| (0..k).map(|i| cm.counts[i][j] as u128).sum())
        .collect();
    let n = truth.len() as u128;
    let (mut observed, mut expected) = (0u128, 0u128);
    for i in 0..k {
        for j in 0..k {
            let w = (i.abs_diff(j) as u128).pow(2);
            observed += w * cm.counts[i][j] as u128;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0 {
        return if observed == 0 {
            Ok(1.0)
        } else {
            Err(PonError::UndefinedMetric(
                "kappa with degenerate marginals".into(),
            ))
        };
    }
    Ok(1.0 - (n * observed) as f64 / expected as f64)
}

/// Mann–Whitney AUC for binary labels; tied scores count one half.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_same_len(labels.len(), scores.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PonError::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PonError::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their average
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += avg_rank * tied_pos as f64;
        start = end;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Unweighted mean of one-vs-rest AUCs over classes that occur in `labels`.
pub fn macro_auc(labels: &[usize], probs: &[ProbVector]) -> Result<f64> {
    check_same_len(labels.len(), probs.len())?;
    let k = probs
        .first()
        .map(ProbVector::num_classes)
        .ok_or_else(|| PonError::invalid("AUC of an empty sample"))?;
    if probs.iter().any(|p| p.num_classes() != k) {
        return Err(PonError::invalid("probability rows differ in length"));
    }
    let mut aucs = Vec::with_capacity(k);
    for c in 0..k {
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let present = is_c.iter().filter(|&&b| b).count();
        if present == 0 || present == labels.len() {
            warn!("class {c} has no one-vs-rest contrast in the labels; excluded from macro AUC");
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p.as_slice()[c]).collect();
        aucs.push(binary_auc(&is_c, &scores)?);
    }
    if aucs.is_empty() {
        return Err(PonError::UndefinedMetric(
            "no class admits a one-vs-rest AUC".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Probability mass on classes at or above `threshold_class`.
pub fn binarize_significant(pred: &ProbVector, threshold_class: ClassLabel) -> Result<f64> {
    let t = threshold_class.index();
    if t == 0 || t >= pred.num_classes() {
        return Err(PonError::invalid(format!(
            "threshold class must lie in 1..{}, got {t}",
            pred.num_classes()
        )));
    }
    Ok(pred.as_slice()[t..].iter().sum::<f64>().min(1.0))
}

/// One ROC operating point: samples with `score >= threshold` are positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical ROC step function from `(0,0)` to `(1,1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoints {
    pub points: Vec<RocPoint>,
}

struct RocCounts {
    n_pos: u64,
    n_neg: u64,
    /// `(threshold, tp, fp)`; the first row is the reject-all point.
    rows: Vec<(f64, u64, u64)>,
}

fn roc_counts(labels: &[bool], scores: &[f64]) -> Result<RocCounts> {
    check_same_len(labels.len(), scores.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PonError::UndefinedMetric(
            "operating points need both positive and negative samples".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PonError::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rows = vec![(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        rows.push((threshold, tp, fp));
    }
    Ok(RocCounts { n_pos, n_neg, rows })
}

pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<RocPoints> {
    let c = roc_counts(labels, scores)?;
    Ok(RocPoints {
        points: c
            .rows
            .iter()
            .map(|&(threshold, tp, fp)| RocPoint {
                threshold,
                fpr: fp as f64 / c.n_neg as f64,
                tpr: tp as f64 / c.n_pos as f64,
            })
            .collect(),
    })
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target < 1.0) {
        return Err(PonError::invalid(format!(
            "target must lie in (0, 1), got {target}"
        )));
    }
    Ok(())
}

/// Highest sensitivity among operating points with specificity `>= spec_target`.
pub fn sen_at_spec(labels: &[bool], scores: &[f64], spec_target: f64) -> Result<f64> {
    check_target(spec_target)?;
    let c = roc_counts(labels, scores)?;
    let best = c
        .rows
        .iter()
        .filter(|&&(_, _, fp)| (c.n_neg - fp) as f64 / c.n_neg as f64 >= spec_target)
        .map(|&(_, tp, _)| tp)
        .max()
        .unwrap_or(0);
    Ok(best as f64 / c.n_pos as f64)
}

/// Highest specificity among operating points with sensitivity `>= sen_target`.
pub fn spec_at_sen(labels: &[bool], scores: &[f64], sen_target: f64) -> Result<f64> {
    check_target(sen_target)?;
    let c = roc_counts(labels, scores)?;
    let best = c
        .rows
        .iter()
        .filter(|&&(_, tp, _)| tp as f64 / c.n_pos as f64 >= sen_target)
        .map(|&(_, _, fp)| c.n_neg - fp)
        .max()
        .unwrap_or(0);
    Ok(best as f64 / c.n_neg as f64)
}

/// Model output for one sample, as consumed by [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Class distribution; absent for heads without one (cumulative ordinal).
    pub probs: Option<ProbVector>,
    /// `exceedance[j]` scores `y > j`, for `j = 0..K−1`.
    pub exceedance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoints {
    pub sen_at_spec80: Option<f64>,
    pub spec_at_sen80: Option<f64>,
    pub sen_at_spec90: Option<f64>,
    pub spec_at_sen90: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurves {
    pub primary: Option<RocPoints>,
    pub secondary: Option<RocPoints>,
}

/// Full evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub macro_auc: Option<f64>,
    pub qwk: f64,
    pub macro_f1: f64,
    pub primary: OperatingPoints,
    pub secondary: OperatingPoints,
    pub confusion_matrix: ConfusionMatrix,
    pub roc: RocCurves,
}

/// Class thresholds defining the two binarized tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignificanceThresholds {
    pub primary: usize,
    pub secondary: usize,
}

impl Default for SignificanceThresholds {
    fn default() -> Self {
        SignificanceThresholds {
            primary: 3,
            secondary: 2,
        }
    }
}

fn operating_points(
    labels: &[bool],
    scores: &[f64],
    task: &str,
) -> (OperatingPoints, Option<RocPoints>) {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        warn!("{task} task has a single class; its operating points are undefined");
        let none = OperatingPoints {
            sen_at_spec80: None,
            spec_at_sen80: None,
            sen_at_spec90: None,
            spec_at_sen90: None,
        };
        return (none, None);
    }
    let points = OperatingPoints {
        sen_at_spec80: sen_at_spec(labels, scores, 0.8).ok(),
        spec_at_sen80: spec_at_sen(labels, scores, 0.8).ok(),
        sen_at_spec90: sen_at_spec(labels, scores, 0.9).ok(),
        spec_at_sen90: spec_at_sen(labels, scores, 0.9).ok(),
    };
    (points, roc_curve(labels, scores).ok())
}

/// Computes every metric for a labelled set of predictions.
pub fn evaluate(
    truth: &[usize],
    predictions: &[Prediction],
    num_classes: usize,
    thresholds: SignificanceThresholds,
) -> Result<EvalReport> {
    check_same_len(truth.len(), predictions.len())?;
    if truth.is_empty() {
        return Err(PonError::EmptyDataset);
    }
    for t in [thresholds.primary, thresholds.secondary] {
        if t == 0 || t >= num_classes {
            return Err(PonError::Config(format!(
                "significance threshold {t} must lie in 1..{num_classes}"
            )));
        }
    }
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let cm = ConfusionMatrix::from_labels(truth, &predicted, num_classes)?;

    let probs: Option<Vec<ProbVector>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let macro_auc = match probs {
        Some(probs) => match macro_auc(truth, &probs) {
            Ok(v) => Some(v),
            Err(PonError::UndefinedMetric(msg)) => {
                warn!("macro AUC undefined: {msg}");
                None
            }
            Err(e) => return Err(e),
        },
        None => None,
    };

    let task = |threshold: usize, name: &str| {
        let labels: Vec<bool> = truth.iter().map(|&y| y >= threshold).collect();
        let scores: Vec<f64> = predictions
            .iter()
            .map(|p| p.exceedance[threshold - 1])
            .collect();
        operating_points(&labels, &scores, name)
    };
    let (primary, primary_roc) = task(thresholds.primary, "primary");
    let (secondary, secondary_roc) = task(thresholds.secondary, "secondary");

    Ok(EvalReport {
        acc: accuracy(&cm)?,
        macro_auc,
        qwk: qwk(truth, &predicted, num_classes)?,
        macro_f1: macro_f1(&cm)?,
        primary,
        secondary,
        confusion_matrix: cm,
        roc: RocCurves {
            primary: primary_roc,
            secondary: secondary_roc,
        },
    })
}
