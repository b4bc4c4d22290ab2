use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid target range [{lower}, {upper}]: lower bound must be strictly below upper bound")]
    InvalidRange { lower: f64, upper: f64 },

    #[error("non-finite prediction at attack iteration {iteration}")]
    NonFinitePrediction { iteration: usize },

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("ppm: bad magic number {0:?}, expected \"P6\"")]
    PpmBadMagic(String),

    #[error("ppm: unsupported maxval {0}, only 255 is accepted")]
    PpmUnsupportedMaxval(u32),

    #[error("ppm: malformed header: {0}")]
    PpmHeader(String),

    #[error("ppm: truncated payload, expected {expected} bytes, found {found}")]
    PpmTruncated { expected: usize, found: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
