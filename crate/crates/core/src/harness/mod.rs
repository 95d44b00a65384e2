//! Experiment orchestration: configuration, pipeline stages, and reports.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{EpsValue, ExperimentConfig};
pub use report::{EvalReport, ReportRow, REPORT_HEADER};

use thiserror::Error;

/// Harness failures split by exit code: usage errors exit 1, data/artifact
/// errors exit 2.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
        }
    }
}
