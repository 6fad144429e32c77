//! Experiment harness for the softnce library: parameter-estimation
//! comparisons on the synthetic mixture benchmark, single training runs with
//! accuracy and calibration reports, sweep grids, and self-contained audit
//! suites. Commands write CSV/JSON artifacts whose bodies are byte-identical
//! across reruns with the same config and seeds.

use thiserror::Error as ThisError;

pub mod config;
pub mod output;
pub mod runner;
pub mod stats;
pub mod verify;

/// Exit-code contract: 0 success, 1 config error, 2 audit failure,
/// 3 runtime numeric failure.
#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Core(#[from] softnce::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Audit(_) => 2,
            CliError::Core(softnce::Error::NumericFailure(_))
            | CliError::Core(softnce::Error::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}
