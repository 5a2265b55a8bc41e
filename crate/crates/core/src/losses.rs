//! Training criteria and their gradients.
//!
//! Every criterion is expressed on the log-scores `H` that feed the softmax,
//! returning `∂L/∂H`. The Poisson head then chains through
//! `∂H[k]/∂λ = k/λ − 1`; the softmax head uses `∂L/∂H` directly as the
//! gradient on its logits.

use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};
use crate::poisson::{
    log_score_rate_derivative, log_sum_exp, normalize_scores, poisson_log_scores, sigmoid,
    softplus_raw, ClassLabel, LogScores, PoissonRate, ProbVector,
};

/// Scalar loss, optionally with its derivative with respect to the Poisson rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient_wrt_rate: Option<f64>,
}

impl LossValue {
    fn value_only(value: f64) -> Self {
        LossValue {
            value,
            gradient_wrt_rate: None,
        }
    }
}

/// Loss with its gradient over the log-scores (or raw logits).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grad_scores: Vec<f64>,
}

fn check_same_classes(a: &ProbVector, b: &ProbVector) -> Result<()> {
    if a.num_classes() != b.num_classes() {
        return Err(PonError::invalid(format!(
            "class-count mismatch: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(PonError::invalid(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    Ok(())
}

/// Forward KL divergence `Σ P[k] ln(P[k] / P̂[k])` with `0·ln 0 = 0`.
pub fn kl_divergence(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    check_same_classes(target, pred)?;
    let kl = target
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Focusing weight `max(P[y] − P̂[y], 0)^γ`, with `0^0 = 1`.
fn focal_weight(target_at_label: f64, pred_at_label: f64, gamma: f64) -> f64 {
    (target_at_label - pred_at_label).max(0.0).powf(gamma)
}

/// Poisson focal loss `w^γ · KL(P‖P̂)`, `w = max(P[y] − P̂[y], 0)`.
pub fn poisson_focal_loss(
    target: &ProbVector,
    pred: &ProbVector,
    label: ClassLabel,
    gamma: f64,
) -> Result<LossValue> {
    check_gamma(gamma)?;
    let kl = kl_divergence(target, pred)?;
    ClassLabel::new(label.index(), pred.num_classes())?;
    let w = focal_weight(target.get(label), pred.get(label), gamma);
    Ok(LossValue::value_only(w * kl))
}

/// `−ln P̂[y]`.
pub fn cross_entropy(label: ClassLabel, pred: &ProbVector) -> Result<LossValue> {
    ClassLabel::new(label.index(), pred.num_classes())?;
    Ok(LossValue::value_only(-pred.get(label).ln()))
}

/// Vanilla focal loss `−(1 − P̂[y])^γ ln P̂[y]`.
pub fn focal_loss(label: ClassLabel, pred: &ProbVector, gamma: f64) -> Result<LossValue> {
    check_gamma(gamma)?;
    ClassLabel::new(label.index(), pred.num_classes())?;
    let p = pred.get(label);
    Ok(LossValue::value_only(-(1.0 - p).powf(gamma) * p.ln()))
}

/// Squared earth mover's distance between the two CDFs.
pub fn squared_emd(target: &ProbVector, pred: &ProbVector) -> Result<LossValue> {
    check_same_classes(target, pred)?;
    let (mut ct, mut cp, mut total) = (0.0, 0.0, 0.0);
    for (&t, &p) in target.as_slice().iter().zip(pred.as_slice()) {
        ct += t;
        cp += p;
        total += (ct - cp) * (ct - cp);
    }
    Ok(LossValue::value_only(total))
}

/// Classification criterion applied to the log-scores of a distribution head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// `KL(P‖P̂)`.
    Kl,
    /// `max(P[y] − P̂[y], 0)^γ · KL(P‖P̂)`.
    PoissonFocal { gamma: f64 },
    /// `−ln P̂[y]`; the target distribution is ignored.
    CrossEntropy,
    /// `−(1 − P̂[y])^γ ln P̂[y]`; the target distribution is ignored.
    Focal { gamma: f64 },
    /// `Σ (CDF_P − CDF_P̂)²`.
    SquaredEmd,
}

impl Criterion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Criterion::PoissonFocal { gamma } | Criterion::Focal { gamma } => check_gamma(gamma),
            _ => Ok(()),
        }
    }

    /// Value and `∂L/∂H` for a prediction `P̂ = softmax(H)`.
    pub fn on_scores(
        &self,
        target: &ProbVector,
        label: ClassLabel,
        scores: &LogScores,
    ) -> Result<ScoreLoss> {
        self.validate()?;
        let h = scores.as_slice();
        let k = h.len();
        if target.num_classes() != k {
            return Err(PonError::invalid(format!(
                "class-count mismatch: target {} vs scores {k}",
                target.num_classes()
            )));
        }
        ClassLabel::new(label.index(), k)?;
        let y = label.index();
        let lse = log_sum_exp(h);
        let log_p: Vec<f64> = h.iter().map(|&s| s - lse).collect();
        let p = normalize_scores(scores);
        let p = p.as_slice();
        let tgt = target.as_slice();

        let loss = match *self {
            Criterion::Kl => {
                let value = kl_from_log(tgt, &log_p);
                ScoreLoss {
                    value,
                    grad_scores: p.iter().zip(tgt).map(|(q, t)| q - t).collect(),
                }
            }
            Criterion::PoissonFocal { gamma } => {
                let kl = kl_from_log(tgt, &log_p);
                let w = tgt[y] - p[y];
                if w <= 0.0 {
                    if gamma == 0.0 {
                        ScoreLoss {
                            value: kl,
                            grad_scores: p.iter().zip(tgt).map(|(q, t)| q - t).collect(),
                        }
                    } else {
                        ScoreLoss {
                            value: 0.0,
                            grad_scores: vec![0.0; k],
                        }
                    }
                } else {
                    let wg = w.powf(gamma);
                    // d w / d H[j] = −p[y](δ_{yj} − p[j])
                    let dweight = if gamma == 0.0 {
                        0.0
                    } else {
                        gamma * w.powf(gamma - 1.0) * kl
                    };
                    let grad = (0..k)
                        .map(|j| {
                            let dw = -p[y] * (delta(y, j) - p[j]);
                            dweight * dw + wg * (p[j] - tgt[j])
                        })
                        .collect();
                    ScoreLoss {
                        value: wg * kl,
                        grad_scores: grad,
                    }
                }
            }
            Criterion::CrossEntropy => ScoreLoss {
                value: -log_p[y],
                grad_scores: (0..k).map(|j| p[j] - delta(y, j)).collect(),
            },
            Criterion::Focal { gamma } => {
                let py = p[y];
                let one_minus = 1.0 - py;
                let value = -one_minus.powf(gamma) * log_p[y];
                // dL/dp_y = γ(1−p)^{γ−1} ln p − (1−p)^γ / p, times dp_y/dH_j = p_y(δ − p_j)
                let focus = if gamma == 0.0 || one_minus <= 0.0 {
                    0.0
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * py * log_p[y]
                };
                let coeff = focus - one_minus.powf(gamma);
                ScoreLoss {
                    value,
                    grad_scores: (0..k).map(|j| coeff * (delta(y, j) - p[j])).collect(),
                }
            }
            Criterion::SquaredEmd => {
                let mut gaps = Vec::with_capacity(k);
                let (mut ct, mut cp, mut value) = (0.0, 0.0, 0.0);
                for j in 0..k {
                    ct += tgt[j];
                    cp += p[j];
                    gaps.push(ct - cp);
                    value += (ct - cp) * (ct - cp);
                }
                // dL/dp_j = −2 Σ_{m ≥ j} gap_m
                let mut grad_p = vec![0.0; k];
                let mut tail = 0.0;
                for j in (0..k).rev() {
                    tail += gaps[j];
                    grad_p[j] = -2.0 * tail;
                }
                ScoreLoss {
                    value,
                    grad_scores: softmax_backward(p, &grad_p),
                }
            }
        };
        Ok(loss)
    }
}

#[inline]
fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn kl_from_log(target: &[f64], log_pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(log_pred)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &lq)| t * (t.ln() - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Pulls `∂L/∂p` back through `p = softmax(H)`.
pub(crate) fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(grad_p)
        .map(|(pi, gi)| pi * (gi - dot))
        .collect()
}

/// `∂L/∂λ = Σ_k ∂L/∂H[k] · ∂H[k]/∂λ`.
pub fn rate_gradient(rate: PoissonRate, grad_scores: &[f64]) -> f64 {
    rate_gradient_with(rate, grad_scores, log_score_rate_derivative)
}

/// [`rate_gradient`] with a caller-supplied `∂H[k]/∂λ`.
pub fn rate_gradient_with(
    rate: PoissonRate,
    grad_scores: &[f64],
    score_derivative: fn(usize, f64) -> f64,
) -> f64 {
    let lambda = rate.value();
    grad_scores
        .iter()
        .enumerate()
        .map(|(k, g)| g * score_derivative(k, lambda))
        .sum()
}

/// Evaluates `criterion` on the Poisson head at `rate`, with `∂L/∂λ`.
pub fn poisson_head_loss(
    criterion: Criterion,
    target: &ProbVector,
    label: ClassLabel,
    rate: PoissonRate,
) -> Result<LossValue> {
    let scores = poisson_log_scores(rate, target.num_classes())?;
    let loss = criterion.on_scores(target, label, &scores)?;
    Ok(LossValue {
        value: loss.value,
        gradient_wrt_rate: Some(rate_gradient(rate, &loss.grad_scores)),
    })
}

/// Poisson focal loss evaluated at a rate, with its rate gradient.
pub fn poisson_focal_loss_at_rate(
    target: &ProbVector,
    label: ClassLabel,
    rate: PoissonRate,
    gamma: f64,
) -> Result<LossValue> {
    poisson_head_loss(Criterion::PoissonFocal { gamma }, target, label, rate)
}

/// Summed binary cross-entropy of `K − 1` cumulative logits against a threshold code.
pub fn cumulative_bce(code: &[f64], logits: &[f64]) -> Result<ScoreLoss> {
    if code.len() != logits.len() {
        return Err(PonError::invalid(format!(
            "code length {} does not match {} logits",
            code.len(),
            logits.len()
        )));
    }
    let value = code
        .iter()
        .zip(logits)
        .map(|(&c, &z)| softplus_raw(z) - c * z)
        .sum();
    let grad_scores = code
        .iter()
        .zip(logits)
        .map(|(&c, &z)| sigmoid(z) - c)
        .collect();
    Ok(ScoreLoss { value, grad_scores })
}
