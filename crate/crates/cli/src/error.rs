use std::path::{Path, PathBuf};

use pon_core::PonError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] PonError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                PonError::InvalidInput(_)
                | PonError::Config(_)
                | PonError::Validation { .. }
                | PonError::Parse { .. }
                | PonError::EmptyDataset
                | PonError::Serde(_) => 1,
                PonError::UndefinedMetric(_)
                | PonError::Divergence { .. }
                | PonError::Io { .. } => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
