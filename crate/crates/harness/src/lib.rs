//! Experiment orchestration for the teacher-student multitask simulator:
//! configuration, single runs, resumable sweeps, output files and the
//! checks behind `mtldyn validate`.

pub mod cache;
pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;
pub mod validate;

pub use config::{Coordinates, ExperimentConfig};
pub use experiment::{run_single, ResultRow, RowStatus};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mtldyn_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Version stamp written into sweep metadata.
pub fn version_stamp() -> String {
    match option_env!("MTLDYN_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}
