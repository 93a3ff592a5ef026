use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },
    #[error("data hygiene violation: {0}")]
    Hygiene(String),
    #[error("inputs are not comparable: {0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}; batch scene seeds {seeds:?}")]
    NonFiniteLoss { epoch: usize, seeds: Vec<u64> },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// True for errors caused by the caller's configuration or usage rather
    /// than by the runtime environment.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Hygiene(_) | Error::Mismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
