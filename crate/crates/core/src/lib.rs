//! Ordinal classification with a unimodal truncated-Poisson head, Poisson-encoded
//! soft targets, a focal KL loss and a memory-bank contrastive term, plus the
//! metrics and data tooling around them.

pub mod contrastive;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod poisson;

pub use contrastive::{MclVariant, MemoryBank, Projection, SampleId};
pub use data::{Dataset, SyntheticConfig};
pub use error::{PonError, Result};
pub use poisson::{ClassLabel, LogScores, PoissonRate, ProbVector};
