//! Trainable model, optimizer, sampler and training loop.

mod adam;
mod network;
mod sampler;
mod train;

pub use adam::AdamState;
pub use network::{
    BatchResult, BatchSample, ClassificationLoss, ContrastiveSettings, Dense, ForwardOutput,
    HeadKind, HeadOutput, ModelConfig, ModelParams, Network, Objective,
};
pub use sampler::WeightedSampler;
pub use train::{
    evaluate_network, predict_all, train, Checkpoint, EpochRecord, Method, MethodSpec, Toggles,
    TrainConfig, TrainOutput, Trainer, ValMetrics, CHECKPOINT_VERSION,
};
