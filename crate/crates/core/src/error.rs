use std::path::PathBuf;

use thiserror::Error;

use crate::prior_model::AuxiliaryParameters;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The optimizer did not converge from any start; the best point found is attached.
    #[error("auxiliary parameter estimation failed: {message}")]
    EstimationFailed {
        message: String,
        best: AuxiliaryParameters,
        objective: f64,
    },

    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Simulator(#[from] SimulatorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Failures raised by a simulator run.
#[derive(Debug, Clone, Error)]
pub enum SimulatorError {
    #[error("simulator failed: {message}")]
    Failed { message: String, output: String },

    #[error("simulator timed out after {seconds} s")]
    Timeout { seconds: f64, output: String },

    #[error("simulator protocol error: {0}")]
    Protocol(String),

    #[error("simulator became unstable: {0}")]
    Unstable(String),
}
