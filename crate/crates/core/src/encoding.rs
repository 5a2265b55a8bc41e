//! Label encodings: Poisson, one-hot, cumulative ordinal and Gaussian soft labels.

use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};
use crate::poisson::{check_class_count, ln_factorial, softmax, ClassLabel, ProbVector};

/// Temperature-sharpened truncated Poisson with rate equal to the label.
///
/// `P[k] ∝ (y^k e^{−y} / k!)^t`. For `y = 0` the pmf is the point mass at
/// class 0 (`0^0 = 1`), independent of `t`. For `y ≥ 1` the two largest
/// entries are tied at `y − 1` and `y`.
pub fn poisson_encode(
    label: ClassLabel,
    num_classes: usize,
    temperature: f64,
) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PonError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_class_count(num_classes)?;
    let y = label.index();
    if y == 0 {
        return ProbVector::delta(label, num_classes);
    }
    ClassLabel::new(y, num_classes)?;
    let yf = y as f64;
    let ln_y = yf.ln();
    let logits: Vec<f64> = (0..num_classes)
        .map(|k| temperature * (k as f64 * ln_y - yf - ln_factorial(k)))
        .collect();
    Ok(ProbVector::from_normalized(softmax(&logits)))
}

pub fn one_hot_encode(label: ClassLabel, num_classes: usize) -> Result<ProbVector> {
    ProbVector::delta(label, num_classes)
}

/// Cumulative threshold code: entry `j` is 1 iff `label > j`, length `K − 1`.
pub fn ordinal_cumulative_encode(label: ClassLabel, num_classes: usize) -> Result<Vec<f64>> {
    check_class_count(num_classes)?;
    ClassLabel::new(label.index(), num_classes)?;
    Ok((0..num_classes - 1)
        .map(|j| if label.index() > j { 1.0 } else { 0.0 })
        .collect())
}

/// Gaussian-kernel soft label `P[k] ∝ exp(−(k − y)² / 2σ²)`.
pub fn soft_label_encode(label: ClassLabel, num_classes: usize, sigma: f64) -> Result<ProbVector> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PonError::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    check_class_count(num_classes)?;
    ClassLabel::new(label.index(), num_classes)?;
    let y = label.index() as f64;
    let logits: Vec<f64> = (0..num_classes)
        .map(|k| {
            let d = k as f64 - y;
            -d * d / (2.0 * sigma * sigma)
        })
        .collect();
    Ok(ProbVector::from_normalized(softmax(&logits)))
}

/// Distribution-valued target used by the KL-type criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetEncoding {
    OneHot,
    Poisson { temperature: f64 },
    SoftLabel { sigma: f64 },
}

impl TargetEncoding {
    pub fn encode(&self, label: ClassLabel, num_classes: usize) -> Result<ProbVector> {
        match *self {
            TargetEncoding::OneHot => one_hot_encode(label, num_classes),
            TargetEncoding::Poisson { temperature } => {
                poisson_encode(label, num_classes, temperature)
            }
            TargetEncoding::SoftLabel { sigma } => soft_label_encode(label, num_classes, sigma),
        }
    }
}
