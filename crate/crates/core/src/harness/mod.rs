//! Datasets, run configuration, the training loop, metrics and the CLI.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod train;
pub mod verify;

use thiserror::Error;

use crate::kalman::KalmanError;
use crate::model::ModelError;
use crate::optim::OptimError;
use crate::oracle::OracleError;

pub use bench::{run_bench, summarize, BenchCell, BenchRow};
pub use config::{load_config_file, parse_config_text, OptimizerKind, RunConfig, CONFIG_KEYS};
pub use dataset::{load_csv, make_synthetic, write_csv, CsvSchema, Dataset, SyntheticKind, Task};
pub use metrics::{parse_record, parse_records, MetricsRecord, Split};
pub use train::{accuracy, build_network, evaluate, load_dataset, pearson, run, train, RunStatus, TrainOutcome};
pub use verify::{run_verify_suite, CheckOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl HarnessError {
    /// Errors caused by the invocation itself rather than by the numerics.
    pub fn is_usage(&self) -> bool {
        match self {
            Self::FileNotFound(_) | Self::Io { .. } | Self::Parse { .. } | Self::Schema(_) | Self::Config(_) => true,
            Self::Optim(e) => matches!(e, OptimError::InvalidConfig(_)),
            Self::Kalman(e) => matches!(e, KalmanError::InvalidConfig(_) | KalmanError::Parse { .. }),
            Self::Model(_) | Self::Oracle(_) => false,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
