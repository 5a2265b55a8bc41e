//! Truncated-Poisson prediction head.
//!
//! The classifier emits one scalar per sample. After a softplus it becomes the
//! Poisson rate `λ`, and the class distribution over `k = 0..K` is the Poisson
//! pmf restricted to those classes and renormalized. Working in log-space,
//! `H[k] = k·ln λ − λ − ln k!` and the prediction is `softmax(H)`.

use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};

/// Smallest rate the head will emit; keeps `ln λ` finite.
pub const MIN_RATE: f64 = 1e-12;

/// Above this pre-activation softplus switches to its asymptotic form.
const SOFTPLUS_LINEAR_FROM: f64 = 30.0;

/// Tolerance on the sum of a [`ProbVector`].
const SUM_TOLERANCE: f64 = 1e-9;

/// Exact factorials for `k < 20` (all fit in a `u64`).
const EXACT_FACTORIAL_LIMIT: usize = 20;

/// Positive, finite Poisson rate.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PoissonRate(f64);

impl PoissonRate {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(PonError::invalid(format!(
                "Poisson rate must be positive and finite, got {value}"
            )));
        }
        Ok(PoissonRate(value))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PoissonRate {
    type Error = PonError;

    fn try_from(value: f64) -> Result<Self> {
        PoissonRate::new(value)
    }
}

impl From<PoissonRate> for f64 {
    fn from(rate: PoissonRate) -> f64 {
        rate.0
    }
}

/// Ordinal class index in `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(usize);

impl ClassLabel {
    pub fn new(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(PonError::invalid(format!(
                "class index {index} out of range for {num_classes} classes"
            )));
        }
        Ok(ClassLabel(index))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unnormalized log-probabilities over `K ≥ 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScores {
    scores: Vec<f64>,
}

impl LogScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        check_class_count(scores.len())?;
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(PonError::invalid(format!("non-finite log-score {bad}")));
        }
        Ok(LogScores { scores })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }
}

/// Discrete probability distribution over `K ≥ 2` ordered classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_class_count(probs.len())?;
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(PonError::invalid(format!("invalid probability {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(PonError::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(ProbVector { probs })
    }

    /// Point mass at `label`.
    pub fn delta(label: ClassLabel, num_classes: usize) -> Result<Self> {
        check_class_count(num_classes)?;
        ClassLabel::new(label.index(), num_classes)?;
        let mut probs = vec![0.0; num_classes];
        probs[label.index()] = 1.0;
        Ok(ProbVector { probs })
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        ProbVector { probs }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, label: ClassLabel) -> f64 {
        self.probs[label.index()]
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// True when the entries rise (non-strictly) to a single peak or plateau
    /// and then fall (non-strictly).
    pub fn is_unimodal(&self) -> bool {
        let p = &self.probs;
        let mut k = 1;
        while k < p.len() && p[k] >= p[k - 1] {
            k += 1;
        }
        while k < p.len() && p[k] <= p[k - 1] {
            k += 1;
        }
        k == p.len()
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = PonError;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        ProbVector::new(probs)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Vec<f64> {
        p.probs
    }
}

pub(crate) fn check_class_count(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(PonError::invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// Overflow-safe `ln(1 + e^z)` floored at [`MIN_RATE`].
pub fn softplus(z: f64) -> Result<PoissonRate> {
    if !z.is_finite() {
        return Err(PonError::invalid(format!("softplus of non-finite {z}")));
    }
    Ok(PoissonRate(softplus_raw(z).max(MIN_RATE)))
}

pub(crate) fn softplus_raw(z: f64) -> f64 {
    if z > SOFTPLUS_LINEAR_FROM {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function, the derivative of softplus.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln k!` without forming the factorial for large `k`.
pub fn ln_factorial(k: usize) -> f64 {
    if k < EXACT_FACTORIAL_LIMIT {
        let exact: u64 = (2..=k as u64).product();
        (exact as f64).ln()
    } else {
        statrs::function::gamma::ln_gamma(k as f64 + 1.0)
    }
}

/// `H[k] = k·ln λ − λ − ln k!` for `k = 0..K`.
pub fn poisson_log_scores(rate: PoissonRate, num_classes: usize) -> Result<LogScores> {
    check_class_count(num_classes)?;
    let lambda = rate.value();
    let ln_lambda = lambda.ln();
    let scores = (0..num_classes)
        .map(|k| k as f64 * ln_lambda - lambda - ln_factorial(k))
        .collect();
    Ok(LogScores { scores })
}

/// `∂H[k]/∂λ = k/λ − 1`.
#[inline]
pub fn log_score_rate_derivative(k: usize, lambda: f64) -> f64 {
    k as f64 / lambda - 1.0
}

/// Max-shifted softmax over the log-scores.
pub fn normalize_scores(scores: &LogScores) -> ProbVector {
    ProbVector::from_normalized(softmax(scores.as_slice()))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Numerically stable `ln Σ e^{z}`.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Predicted class distribution for a given rate.
pub fn poisson_distribution(rate: PoissonRate, num_classes: usize) -> Result<ProbVector> {
    Ok(normalize_scores(&poisson_log_scores(rate, num_classes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_reference_values() {
        assert!((softplus(0.0).unwrap().value() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0).unwrap().value() - 100.0).abs() < 1e-12);
        // mpmath, 40 digits
        let expected = 0.006_715_348_489_118_068;
        assert!((softplus(-5.0).unwrap().value() - expected).abs() < 1e-15);
        assert!(softplus(-1000.0).unwrap().value() >= MIN_RATE);
    }

    #[test]
    fn softplus_threshold_is_continuous() {
        let below = 30.0f64.exp().ln_1p();
        let above = 30.0 + (-30.0f64).exp().ln_1p();
        assert!((below - above).abs() < 1e-13);
    }

    #[test]
    fn softplus_rejects_non_finite() {
        assert!(softplus(f64::NAN).is_err());
        assert!(softplus(f64::INFINITY).is_err());
    }

    #[test]
    fn rate_rejects_non_positive() {
        assert!(PoissonRate::new(0.0).is_err());
        assert!(PoissonRate::new(-1.0).is_err());
        assert!(PoissonRate::new(f64::NAN).is_err());
    }

    #[test]
    fn log_scores_at_unit_rate() {
        let h = poisson_log_scores(PoissonRate::new(1.0).unwrap(), 5).unwrap();
        let expected = [
            -1.0,
            -1.0,
            -1.693_147_180_559_945_3,
            -2.791_759_469_228_055,
            -4.178_053_830_347_945,
        ];
        for (a, b) in h.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_events_score_is_minus_rate() {
        for lambda in [0.3, 1.0, 7.5, 42.0] {
            let h = poisson_log_scores(PoissonRate::new(lambda).unwrap(), 2).unwrap();
            assert_eq!(h.as_slice()[0], -lambda);
        }
    }

    #[test]
    fn integer_rate_has_tied_mode_scores() {
        let h = poisson_log_scores(PoissonRate::new(5.0).unwrap(), 10).unwrap();
        let s = h.as_slice();
        assert!((s[4] - s[5]).abs() < 1e-12);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (k, &v) in s.iter().enumerate() {
            if k != 4 && k != 5 {
                assert!(v < max - 1e-3);
            }
        }
    }

    #[test]
    fn normalized_unit_rate() {
        let p = poisson_distribution(PoissonRate::new(1.0).unwrap(), 5).unwrap();
        let expected = [0.369231, 0.369231, 0.184615, 0.061538, 0.015385];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vanishing_rate_concentrates_on_zero() {
        let p = poisson_distribution(PoissonRate::new(1e-8).unwrap(), 2).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-6);
        assert!(p.as_slice()[1] < 1e-6);
    }

    #[test]
    fn mode_of_fractional_rate() {
        let p = poisson_distribution(PoissonRate::new(2.5).unwrap(), 5).unwrap();
        assert_eq!(p.argmax(), 2);
    }

    #[test]
    fn ln_factorial_matches_gamma_across_table_edge() {
        for k in 15..25 {
            let g = statrs::function::gamma::ln_gamma(k as f64 + 1.0);
            assert!((ln_factorial(k) - g).abs() < 1e-10 * g.max(1.0));
        }
        assert!(ln_factorial(500).is_finite());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn unimodality_check() {
        let ok = ProbVector::new(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        let bad = ProbVector::new(vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        assert!(ok.is_unimodal());
        assert!(!bad.is_unimodal());
    }
}
