//! End-to-end training: balanced sampling, mean batch objective, Adam, and
//! memory-bank refresh after every step.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::network::{
    BatchSample, ClassificationLoss, ContrastiveSettings, HeadKind, ModelConfig, Network, Objective,
};
use super::sampler::WeightedSampler;
use crate::contrastive::{MclVariant, MemoryBank};
use crate::data::Dataset;
use crate::encoding::TargetEncoding;
use crate::error::{PonError, Result};
use crate::losses::Criterion;
use crate::metrics::{evaluate, EvalReport, Prediction, SignificanceThresholds};

/// Stream offset separating per-epoch sampling RNGs from initialization.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Poisson-encoding temperature `t`.
    pub temperature: f64,
    /// Focusing parameter `γ` (Poisson focal and vanilla focal losses).
    pub gamma: f64,
    /// Contrast-set size.
    pub q: usize,
    pub seed: u64,
    /// Width of the Gaussian soft-label baseline.
    pub soft_label_sigma: f64,
    pub mcl_variant: MclVariant,
    /// Class-balanced sampling; plain shuffling when off.
    pub weighted_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-4,
            temperature: 0.1,
            gamma: 2.0,
            q: 20,
            seed: 0,
            soft_label_sigma: 1.0,
            mcl_variant: MclVariant::Mass,
            weighted_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PonError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PonError::Config("learning_rate must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PonError::Config("temperature must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PonError::Config("gamma must be >= 0".into()));
        }
        if self.q == 0 {
            return Err(PonError::Config("q must be at least 1".into()));
        }
        if !(self.soft_label_sigma > 0.0 && self.soft_label_sigma.is_finite()) {
            return Err(PonError::Config("soft_label_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Poisson-head model; components selectable through [`Toggles`].
    Pon,
    /// Softmax head, one-hot targets, cross-entropy.
    Ce,
    /// Softmax head, vanilla focal loss.
    Focal,
    /// Softmax head, squared earth mover's distance to the one-hot target.
    Emd,
    /// `K − 1` cumulative sigmoids with binary cross-entropy.
    Ordinal,
    /// Softmax head, KL to a Gaussian soft label.
    Softlabel,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pon,
        Method::Ce,
        Method::Focal,
        Method::Emd,
        Method::Ordinal,
        Method::Softlabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pon => "pon",
            Method::Ce => "ce",
            Method::Focal => "focal",
            Method::Emd => "emd",
            Method::Ordinal => "ordinal",
            Method::Softlabel => "softlabel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PonError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PonError::Config(format!("unknown method `{s}`")))
    }
}

/// PON component switches. With everything off the recipe is plain CE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub poisson_head: bool,
    pub poisson_encoding: bool,
    pub pfl: bool,
    pub mcl: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            poisson_head: true,
            poisson_encoding: true,
            pfl: true,
            mcl: true,
        }
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        poisson_head: false,
        poisson_encoding: false,
        pfl: false,
        mcl: false,
    };

    /// Short label such as `PP+PE+pfl`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.poisson_head, "PP"),
            (self.poisson_encoding, "PE"),
            (self.pfl, "pfl"),
            (self.mcl, "mcl"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Method plus the PON toggles (ignored by the baselines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: Method,
    #[serde(default)]
    pub toggles: Toggles,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            name: Method::Pon,
            toggles: Toggles::default(),
        }
    }
}

impl MethodSpec {
    pub fn new(name: Method) -> Self {
        MethodSpec {
            name,
            toggles: Toggles::default(),
        }
    }

    pub fn pon(toggles: Toggles) -> Self {
        MethodSpec {
            name: Method::Pon,
            toggles,
        }
    }

    pub fn label(&self) -> String {
        match self.name {
            Method::Pon if self.toggles == Toggles::default() => "pon".to_string(),
            Method::Pon => format!("pon[{}]", self.toggles.label()),
            other => other.name().to_string(),
        }
    }

    pub fn objective(&self, config: &TrainConfig) -> Objective {
        let one_hot = TargetEncoding::OneHot;
        let distribution =
            |target, criterion| ClassificationLoss::Distribution { target, criterion };
        let (head, classification, mcl) = match self.name {
            Method::Pon => {
                let t = self.toggles;
                let head = if t.poisson_head {
                    HeadKind::Poisson
                } else {
                    HeadKind::Softmax
                };
                let target = if t.poisson_encoding {
                    TargetEncoding::Poisson {
                        temperature: config.temperature,
                    }
                } else {
                    one_hot
                };
                let criterion = match (t.pfl, t.poisson_encoding) {
                    (true, _) => Criterion::PoissonFocal {
                        gamma: config.gamma,
                    },
                    (false, true) => Criterion::Kl,
                    (false, false) => Criterion::CrossEntropy,
                };
                (head, distribution(target, criterion), t.mcl)
            }
            Method::Ce => (
                HeadKind::Softmax,
                distribution(one_hot, Criterion::CrossEntropy),
                false,
            ),
            Method::Focal => (
                HeadKind::Softmax,
                distribution(
                    one_hot,
                    Criterion::Focal {
                        gamma: config.gamma,
                    },
                ),
                false,
            ),
            Method::Emd => (
                HeadKind::Softmax,
                distribution(one_hot, Criterion::SquaredEmd),
                false,
            ),
            Method::Ordinal => (
                HeadKind::Cumulative,
                ClassificationLoss::CumulativeBce,
                false,
            ),
            Method::Softlabel => (
                HeadKind::Softmax,
                distribution(
                    TargetEncoding::SoftLabel {
                        sigma: config.soft_label_sigma,
                    },
                    Criterion::Kl,
                ),
                false,
            ),
        };
        Objective {
            head,
            classification,
            contrastive: mcl.then_some(ContrastiveSettings {
                q: config.q,
                variant: config.mcl_variant,
            }),
        }
    }
}

/// Headline validation metrics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub acc: f64,
    pub macro_auc: Option<f64>,
    pub qwk: f64,
    pub macro_f1: f64,
}

impl From<&EvalReport> for ValMetrics {
    fn from(r: &EvalReport) -> Self {
        ValMetrics {
            acc: r.acc,
            macro_auc: r.macro_auc,
            qwk: r.qwk,
            macro_f1: r.macro_f1,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean classification term (the Poisson focal loss for the full model).
    pub loss_pfl: f64,
    pub loss_mcl: f64,
    pub train_acc: f64,
    pub val: Option<ValMetrics>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub method: MethodSpec,
    pub network: Network,
    pub adam: AdamState,
    pub bank: MemoryBank,
    /// Completed epochs; the sampling RNG of epoch `e` is a pure function of
    /// `(train.seed, e)`, so this is the whole RNG state.
    pub epochs_done: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| PonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PonError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(PonError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

pub struct Trainer {
    network: Network,
    adam: AdamState,
    bank: MemoryBank,
    model: ModelConfig,
    config: TrainConfig,
    method: MethodSpec,
    objective: Objective,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(
        train: &Dataset,
        model: &ModelConfig,
        config: &TrainConfig,
        method: &MethodSpec,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if train.is_empty() {
            return Err(PonError::EmptyDataset);
        }
        let num_classes = model.num_classes.unwrap_or(train.num_classes());
        if num_classes != train.num_classes() {
            return Err(PonError::Config(format!(
                "model configured for {num_classes} classes, dataset has {}",
                train.num_classes()
            )));
        }
        let objective = method.objective(config);
        objective.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let network = Network::init(
            train.feature_dim(),
            model,
            objective.head,
            num_classes,
            &mut rng,
        )?;
        let adam = AdamState::new(network.params.num_params(), config.learning_rate);
        Ok(Trainer {
            network,
            adam,
            bank: MemoryBank::new(train.len()),
            model: model.clone(),
            config: config.clone(),
            method: *method,
            objective,
            epochs_done: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let objective = ckpt.method.objective(&ckpt.train);
        objective.validate()?;
        if objective.head != ckpt.network.head {
            return Err(PonError::Config(
                "checkpoint head does not match its method".into(),
            ));
        }
        if ckpt.adam.m.len() != ckpt.network.params.num_params() {
            return Err(PonError::Config(
                "checkpoint optimizer state has the wrong shape".into(),
            ));
        }
        Ok(Trainer {
            network: ckpt.network,
            adam: ckpt.adam,
            bank: ckpt.bank,
            model: ckpt.model,
            config: ckpt.train,
            method: ckpt.method,
            objective,
            epochs_done: ckpt.epochs_done,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.config.clone(),
            method: self.method,
            network: self.network.clone(),
            adam: self.adam.clone(),
            bank: self.bank.clone(),
            epochs_done: self.epochs_done,
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn epoch_order(&self, train: &Dataset, epoch: usize) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);
        if self.config.weighted_sampling {
            let sampler = WeightedSampler::new(train.labels(), train.num_classes())?;
            Ok(sampler.stream(train.len(), &mut rng))
        } else {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            Ok(order)
        }
    }

    /// Runs one epoch over `train` and evaluates on `validation` if given.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        validation: Option<&Dataset>,
    ) -> Result<EpochRecord> {
        if train.feature_dim() != self.network.input_dim() {
            return Err(PonError::Config(format!(
                "dataset has {} features, model expects {}",
                train.feature_dim(),
                self.network.input_dim()
            )));
        }
        if train.num_classes() != self.network.num_classes {
            return Err(PonError::Config(format!(
                "dataset has {} classes, model expects {}",
                train.num_classes(),
                self.network.num_classes
            )));
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(train, epoch)?;
        let (mut cls_sum, mut mcl_sum, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut flat = self.network.params.to_flat();

        for (batch_index, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<BatchSample<'_>> = chunk
                .iter()
                .map(|&i| BatchSample {
                    id: train.ids()[i],
                    features: &train.features()[i],
                    label: train.labels()[i],
                })
                .collect();
            let diverged = |message: String| PonError::Divergence {
                epoch,
                batch: batch_index,
                message,
            };
            // shapes and labels were checked up front, so invalid values here
            // come from the parameters
            let result = self
                .network
                .backward(&batch, &self.bank, &self.objective)
                .map_err(|e| match e {
                    PonError::InvalidInput(message) => diverged(message),
                    other => other,
                })?;
            if !result.total.is_finite() {
                return Err(diverged(format!("non-finite loss {}", result.total)));
            }
            self.adam.update(&mut flat, &result.grads.to_flat())?;
            self.network.params.set_flat(&flat)?;
            if !self.network.params.all_finite() {
                return Err(diverged(
                    "non-finite parameters after the optimizer step".into(),
                ));
            }
            if self.objective.contrastive.is_some() {
                for (sample, proj) in batch.iter().zip(result.projections) {
                    if let Some(p) = proj {
                        self.bank.update(sample.id, p, sample.label)?;
                    }
                }
            }
            let n = batch.len();
            cls_sum += result.classification * n as f64;
            mcl_sum += result.contrastive * n as f64;
            correct += batch
                .iter()
                .zip(&result.predicted)
                .filter(|(s, &p)| s.label.index() == p)
                .count();
            seen += n;
        }
        self.epochs_done = epoch;

        let val = match validation {
            Some(v) => Some(ValMetrics::from(
                &self.evaluate(v, SignificanceThresholds::default())?,
            )),
            None => None,
        };
        Ok(EpochRecord {
            epoch,
            loss_pfl: cls_sum / seen as f64,
            loss_mcl: mcl_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val,
        })
    }

    /// Trains until `self.config.epochs` epochs are done, reporting each record.
    pub fn fit(
        &mut self,
        train: &Dataset,
        validation: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while self.epochs_done < self.config.epochs {
            let record = self.run_epoch(train, validation)?;
            on_epoch(&record)?;
            history.push(record);
        }
        Ok(history)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        predict_all(&self.network, data)
    }

    pub fn evaluate(
        &self,
        data: &Dataset,
        thresholds: SignificanceThresholds,
    ) -> Result<EvalReport> {
        evaluate_network(&self.network, data, thresholds)
    }
}

pub fn predict_all(network: &Network, data: &Dataset) -> Result<Vec<Prediction>> {
    data.features().iter().map(|x| network.predict(x)).collect()
}

pub fn evaluate_network(
    network: &Network,
    data: &Dataset,
    thresholds: SignificanceThresholds,
) -> Result<EvalReport> {
    if data.num_classes() != network.num_classes {
        return Err(PonError::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            network.num_classes
        )));
    }
    let predictions = predict_all(network, data)?;
    evaluate(
        &data.label_indices(),
        &predictions,
        network.num_classes,
        thresholds,
    )
}

/// Result of [`train`].
pub struct TrainOutput {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub bank: MemoryBank,
    pub checkpoint: Checkpoint,
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    dataset: &Dataset,
    validation: Option<&Dataset>,
    model: &ModelConfig,
    config: &TrainConfig,
    method: &MethodSpec,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(dataset, model, config, method)?;
    let history = trainer.fit(dataset, validation, |_| Ok(()))?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutput {
        network: checkpoint.network.clone(),
        bank: checkpoint.bank.clone(),
        history,
        checkpoint,
    })
}
