use std::path::PathBuf;

use crate::model::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Config(_)) | Error::Config(_) => "config",
            Error::Tensor(_) => "dimension",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Checkpoint(CheckpointError::Io { .. }) => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
