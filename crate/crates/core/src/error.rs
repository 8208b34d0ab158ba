use std::path::PathBuf;

use thiserror::Error;

use crate::ekf::EkfError;
use crate::glucose::MealError;
use crate::mmh::MmhError;
use crate::model::ModelError;
use crate::ocp::OcpError;
use crate::ode::IntegrationError;

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Meal(#[from] MealError),
    #[error(transparent)]
    Mmh(#[from] MmhError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("{0}")]
    Experiment(String),
}

/// Coarse classification for reporting and process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Numerical,
    Experiment,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Data => "data",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Experiment => "experiment",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Meal(_) => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Data { .. } | Error::Model(_) => ErrorCategory::Data,
            Error::Integration(_) | Error::Mmh(_) | Error::Ocp(_) | Error::Ekf(_) => ErrorCategory::Numerical,
            Error::Experiment(_) => ErrorCategory::Experiment,
        }
    }
}
