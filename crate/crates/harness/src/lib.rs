//! Experiment orchestration for the ensemble Kalman filter lab: scenario
//! files, replicate scheduling, CSV/JSON result files, plot data and the
//! stand-alone audits behind the `enkf-lab` command.

pub mod audits;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod output;
pub mod plot;

use std::path::PathBuf;

use thiserror::Error;

/// Environment variable that overrides the configured output root.
pub const OUT_ENV: &str = "ENKF_LAB_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] enkf_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}
