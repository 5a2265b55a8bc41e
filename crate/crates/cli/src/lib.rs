//! Library side of the `pon` binary, shared with its integration tests.

pub mod commands;
pub mod compare;
pub mod config;
pub mod error;

pub use compare::{compare, format_table, CompareReport, Row, RunMetrics, Summary};
pub use config::{ablation_rows, method_rows, DataSource, Overrides, RunConfig};
pub use error::{CliError, CliResult};
