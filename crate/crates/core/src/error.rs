use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("unknown parameter segment: {0}")]
    UnknownSegment(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("initial loss already set for client {0}")]
    InitialLossAlreadySet(usize),
    #[error("initial loss not set for client {0}")]
    InitialLossUnset(usize),
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("diverged at round {round}: {detail}")]
    Divergence { round: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }
}
