//! MLP encoder, classifier head and projector with a hand-written reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{mcl_loss, MclVariant, MemoryBank, Projection, SampleId};
use crate::encoding::{ordinal_cumulative_encode, TargetEncoding};
use crate::error::{PonError, Result};
use crate::losses::{cumulative_bce, rate_gradient_with, Criterion};
use crate::metrics::Prediction;
use crate::poisson::{
    log_score_rate_derivative, normalize_scores, poisson_log_scores, sigmoid, softplus,
    softplus_raw, ClassLabel, LogScores, PoissonRate, ProbVector, MIN_RATE,
};

/// Affine map `y = W x + b`, `W` stored row-major as `output × input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            weights: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Dense {
            input,
            output,
            weights: (0..input * output)
                .map(|_| rng.random_range(-limit..=limit))
                .collect(),
            bias: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        self.weights
            .chunks_exact(self.input)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.input];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.input..(o + 1) * self.input];
            let grow = &mut grad.weights[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Output layer shape of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One scalar → softplus rate → truncated-Poisson distribution.
    Poisson,
    /// `K` logits → softmax.
    Softmax,
    /// `K − 1` cumulative logits, `σ(z_j)` scoring `y > j`.
    Cumulative,
}

impl HeadKind {
    pub fn output_width(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Poisson => 1,
            HeadKind::Softmax => num_classes,
            HeadKind::Cumulative => num_classes - 1,
        }
    }
}

/// Layer widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    /// Inferred from the training labels when absent.
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: vec![64, 32],
            projector_hidden: 32,
            projection_dim: 16,
            num_classes: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(PonError::Config(
                "encoder widths must be non-empty and positive".into(),
            ));
        }
        if self.projector_hidden == 0 || self.projection_dim == 0 {
            return Err(PonError::Config("projector widths must be positive".into()));
        }
        if matches!(self.num_classes, Some(k) if k < 2) {
            return Err(PonError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Encoder `f`, classifier `h` and projector `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub projector: [Dense; 2],
}

impl ModelParams {
    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(self.projector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(self.projector.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.input, d.output);
        ModelParams {
            encoder: self.encoder.iter().map(z).collect(),
            classifier: z(&self.classifier),
            projector: [z(&self.projector[0]), z(&self.projector[1])],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|d| d.weights.len() + d.bias.len()).sum()
    }

    /// All parameters in a fixed layer order (weights then bias per layer).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in self.layers() {
            out.extend_from_slice(&d.weights);
            out.extend_from_slice(&d.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(PonError::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for d in self.layers_mut() {
            let nw = d.weights.len();
            d.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = d.bias.len();
            d.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|d| d.weights.iter().chain(&d.bias).all(|x| x.is_finite()))
    }

    fn scale(&mut self, factor: f64) {
        for d in self.layers_mut() {
            d.weights
                .iter_mut()
                .chain(d.bias.iter_mut())
                .for_each(|x| *x *= factor);
        }
    }
}

/// What the classifier produced for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Poisson { rate: PoissonRate, pred: ProbVector },
    Softmax { pred: ProbVector },
    Cumulative { exceedance: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    /// Unit-normalized projector output; `None` when the raw output is the zero vector.
    pub projection: Option<Projection>,
}

/// Intermediate values kept for the reverse pass.
struct Trace {
    /// Encoder activations; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Encoder pre-activations.
    pre: Vec<Vec<f64>>,
    head: Vec<f64>,
    proj_pre: Vec<f64>,
    proj_hidden: Vec<f64>,
    proj_raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub params: ModelParams,
    pub head: HeadKind,
    pub num_classes: usize,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        config: &ModelConfig,
        head: HeadKind,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(PonError::Config("input dimension must be positive".into()));
        }
        if num_classes < 2 {
            return Err(PonError::Config("need at least 2 classes".into()));
        }
        let mut encoder = Vec::with_capacity(config.encoder_widths.len());
        let mut width = input_dim;
        for &w in &config.encoder_widths {
            encoder.push(Dense::glorot(width, w, rng));
            width = w;
        }
        let classifier = Dense::glorot(width, head.output_width(num_classes), rng);
        let projector = [
            Dense::glorot(width, config.projector_hidden, rng),
            Dense::glorot(config.projector_hidden, config.projection_dim, rng),
        ];
        Ok(Network {
            params: ModelParams {
                encoder,
                classifier,
                projector,
            },
            head,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.encoder[0].input
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(PonError::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let z = layer.forward(acts.last().expect("input present"));
            acts.push(relu(z.clone()));
            pre.push(z);
        }
        let features = acts.last().expect("encoder output");
        let head = self.params.classifier.forward(features);
        let proj_pre = self.params.projector[0].forward(features);
        let proj_hidden = relu(proj_pre.clone());
        let proj_raw = self.params.projector[1].forward(&proj_hidden);
        Trace {
            acts,
            pre,
            head,
            proj_pre,
            proj_hidden,
            proj_raw,
        }
    }

    fn head_output(&self, raw: &[f64]) -> Result<HeadOutput> {
        Ok(match self.head {
            HeadKind::Poisson => {
                let rate = softplus(raw[0])?;
                let pred = normalize_scores(&poisson_log_scores(rate, self.num_classes)?);
                HeadOutput::Poisson { rate, pred }
            }
            HeadKind::Softmax => HeadOutput::Softmax {
                pred: normalize_scores(&LogScores::new(raw.to_vec())?),
            },
            HeadKind::Cumulative => HeadOutput::Cumulative {
                exceedance: raw.iter().map(|&z| sigmoid(z)).collect(),
            },
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let t = self.trace(x);
        Ok(ForwardOutput {
            head: self.head_output(&t.head)?,
            projection: Projection::new(t.proj_raw).ok(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        let t = self.trace(x);
        Ok(prediction_from(self.head_output(&t.head)?))
    }
}

fn prediction_from(head: HeadOutput) -> Prediction {
    match head {
        HeadOutput::Poisson { pred, .. } | HeadOutput::Softmax { pred } => {
            let p = pred.as_slice();
            let mut exceedance = vec![0.0; p.len() - 1];
            let mut tail = 0.0;
            for j in (0..p.len() - 1).rev() {
                tail += p[j + 1];
                exceedance[j] = tail.min(1.0);
            }
            Prediction {
                class: pred.argmax(),
                probs: Some(pred),
                exceedance,
            }
        }
        HeadOutput::Cumulative { exceedance } => Prediction {
            class: exceedance.iter().filter(|&&p| p > 0.5).count(),
            probs: None,
            exceedance,
        },
    }
}

/// How the classification term is computed from the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassificationLoss {
    /// Criterion over the class distribution of a Poisson or softmax head.
    Distribution {
        target: TargetEncoding,
        criterion: Criterion,
    },
    /// Binary cross-entropy on cumulative threshold logits.
    CumulativeBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSettings {
    pub q: usize,
    pub variant: MclVariant,
}

/// Full training objective: classification term plus optional contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub head: HeadKind,
    pub classification: ClassificationLoss,
    pub contrastive: Option<ContrastiveSettings>,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match (self.head, &self.classification) {
            (HeadKind::Cumulative, ClassificationLoss::CumulativeBce) => Ok(()),
            (HeadKind::Cumulative, _) | (_, ClassificationLoss::CumulativeBce) => Err(
                PonError::Config("the cumulative head pairs only with cumulative BCE".into()),
            ),
            (_, ClassificationLoss::Distribution { criterion, .. }) => criterion.validate(),
        }?;
        if matches!(self.contrastive, Some(c) if c.q == 0) {
            return Err(PonError::Config("q must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training example as seen by [`Network::backward`].
#[derive(Debug, Clone, Copy)]
pub struct BatchSample<'a> {
    pub id: SampleId,
    pub features: &'a [f64],
    pub label: ClassLabel,
}

/// Batch-mean losses, gradients and the by-products the trainer needs.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub total: f64,
    pub classification: f64,
    pub contrastive: f64,
    /// Unaveraged contrastive term of each sample, in batch order.
    pub contrastive_terms: Vec<f64>,
    pub grads: ModelParams,
    pub projections: Vec<Option<Projection>>,
    pub predicted: Vec<usize>,
}

impl Network {
    /// Mean objective over `batch` and its exact gradient.
    ///
    /// `bank` is read-only here: callers write the returned projections back
    /// after the step.
    pub fn backward(
        &self,
        batch: &[BatchSample<'_>],
        bank: &MemoryBank,
        objective: &Objective,
    ) -> Result<BatchResult> {
        self.backward_with(batch, bank, objective, log_score_rate_derivative)
    }

    /// [`Network::backward`] with a caller-supplied `∂H[k]/∂λ`.
    pub fn backward_with(
        &self,
        batch: &[BatchSample<'_>],
        bank: &MemoryBank,
        objective: &Objective,
        score_derivative: fn(usize, f64) -> f64,
    ) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(PonError::invalid("empty batch"));
        }
        if objective.head != self.head {
            return Err(PonError::Config(format!(
                "objective expects a {:?} head, network has {:?}",
                objective.head, self.head
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut classification = 0.0;
        let mut contrastive = 0.0;
        let mut contrastive_terms = Vec::with_capacity(batch.len());
        let mut projections = Vec::with_capacity(batch.len());
        let mut predicted = Vec::with_capacity(batch.len());

        for sample in batch {
            self.check_input(sample.features)?;
            ClassLabel::new(sample.label.index(), self.num_classes)?;
            let t = self.trace(sample.features);

            let (cls_value, grad_head) =
                self.classification_term(&t.head, sample.label, objective, score_derivative)?;
            classification += cls_value;
            predicted.push(prediction_from(self.head_output(&t.head)?).class);

            let features = t.acts.last().expect("encoder output");
            let mut grad_features =
                self.params
                    .classifier
                    .backward(features, &grad_head, &mut grads.classifier);

            let normalized = Projection::normalize(t.proj_raw.clone()).ok();
            let mut mcl_value = 0.0;
            if let (Some(settings), Some((proj, norm))) =
                (objective.contrastive, normalized.as_ref())
            {
                let neighbors = bank.query_nearest(proj, settings.q, Some(sample.id));
                let mcl = mcl_loss(proj, sample.label, &neighbors, settings.variant);
                mcl_value = mcl.value;
                if !neighbors.is_empty() {
                    // through z = u / ‖u‖: (I − z zᵀ) g / ‖u‖
                    let z = proj.as_slice();
                    let radial: f64 = mcl.grad_query.iter().zip(z).map(|(g, zi)| g * zi).sum();
                    let grad_raw: Vec<f64> = mcl
                        .grad_query
                        .iter()
                        .zip(z)
                        .map(|(g, zi)| (g - radial * zi) / norm)
                        .collect();
                    let mut grad_hidden = self.params.projector[1].backward(
                        &t.proj_hidden,
                        &grad_raw,
                        &mut grads.projector[1],
                    );
                    relu_backward(&t.proj_pre, &mut grad_hidden);
                    let g = self.params.projector[0].backward(
                        features,
                        &grad_hidden,
                        &mut grads.projector[0],
                    );
                    grad_features.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            contrastive += mcl_value;
            contrastive_terms.push(mcl_value);
            projections.push(normalized.map(|(p, _)| p));

            let mut grad = grad_features;
            for l in (0..self.params.encoder.len()).rev() {
                relu_backward(&t.pre[l], &mut grad);
                grad = self.params.encoder[l].backward(&t.acts[l], &grad, &mut grads.encoder[l]);
            }
        }

        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        classification /= n;
        contrastive /= n;
        Ok(BatchResult {
            total: classification + contrastive,
            classification,
            contrastive,
            contrastive_terms,
            grads,
            projections,
            predicted,
        })
    }

    /// Per-sample classification loss and its gradient on the raw head outputs.
    fn classification_term(
        &self,
        raw: &[f64],
        label: ClassLabel,
        objective: &Objective,
        score_derivative: fn(usize, f64) -> f64,
    ) -> Result<(f64, Vec<f64>)> {
        let k = self.num_classes;
        match (self.head, objective.classification) {
            (HeadKind::Poisson, ClassificationLoss::Distribution { target, criterion }) => {
                let z = raw[0];
                let rate = softplus(z)?;
                let scores = poisson_log_scores(rate, k)?;
                let loss = criterion.on_scores(&target.encode(label, k)?, label, &scores)?;
                let dl_drate = rate_gradient_with(rate, &loss.grad_scores, score_derivative);
                let drate_dz = if softplus_raw(z) > MIN_RATE {
                    sigmoid(z)
                } else {
                    0.0
                };
                Ok((loss.value, vec![dl_drate * drate_dz]))
            }
            (HeadKind::Softmax, ClassificationLoss::Distribution { target, criterion }) => {
                let scores = LogScores::new(raw.to_vec())?;
                let loss = criterion.on_scores(&target.encode(label, k)?, label, &scores)?;
                Ok((loss.value, loss.grad_scores))
            }
            (HeadKind::Cumulative, ClassificationLoss::CumulativeBce) => {
                let code = ordinal_cumulative_encode(label, k)?;
                let loss = cumulative_bce(&code, raw)?;
                Ok((loss.value, loss.grad_scores))
            }
            _ => Err(PonError::Config(
                "head and classification loss are incompatible".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(head: HeadKind) -> Network {
        let cfg = ModelConfig {
            encoder_widths: vec![4],
            projector_hidden: 3,
            projection_dim: 2,
            num_classes: Some(3),
        };
        Network::init(2, &cfg, head, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_classifier_gives_ln2_rate() {
        let mut net = tiny(HeadKind::Poisson);
        let c = &mut net.params.classifier;
        c.weights.iter_mut().for_each(|w| *w = 0.0);
        c.bias.iter_mut().for_each(|b| *b = 0.0);
        for x in [[0.3, -1.2], [5.0, 2.0]] {
            match net.forward(&x).unwrap().head {
                HeadOutput::Poisson { rate, pred } => {
                    assert_eq!(rate.value(), std::f64::consts::LN_2);
                    assert!(pred.is_unimodal());
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn projection_is_unit_norm() {
        let net = tiny(HeadKind::Poisson);
        let out = net.forward(&[0.7, 0.1]).unwrap();
        let p = out.projection.unwrap();
        let norm: f64 = p.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn head_width_follows_kind() {
        assert_eq!(tiny(HeadKind::Poisson).params.classifier.output, 1);
        assert_eq!(tiny(HeadKind::Softmax).params.classifier.output, 3);
        assert_eq!(tiny(HeadKind::Cumulative).params.classifier.output, 2);
    }

    #[test]
    fn input_width_is_checked() {
        let net = tiny(HeadKind::Softmax);
        assert!(net.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let mut net = tiny(HeadKind::Softmax);
        let mut flat = net.params.to_flat();
        flat[0] = 42.0;
        net.params.set_flat(&flat).unwrap();
        assert_eq!(net.params.to_flat(), flat);
        assert!(net.params.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let d = Dense::glorot(30, 10, &mut ChaCha8Rng::seed_from_u64(0));
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(d.weights.iter().all(|w| w.abs() <= limit));
        assert!(d.bias.iter().all(|&b| b == 0.0));
    }
}
