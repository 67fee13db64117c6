use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("sensing footprint out of scene bounds: {0}")]
    FootprintOutOfBounds(String),
    #[error("point out of scene bounds: ({x:.3}, {y:.3})")]
    OutOfBounds { x: f64, y: f64 },
    #[error("transmitter and receiver coincide")]
    ZeroDistance,
    #[error("receiver grid does not match the sensing footprint: {0}")]
    FootprintMismatch(String),
    #[error("non-positive frequency: {0} Hz")]
    NonPositiveFrequency(f64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt record {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("missing tensor `{0}` in weight file")]
    MissingTensor(String),
    #[error("sequence length {len} exceeds the maximum of {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("ground truth is identically zero; NMSE is undefined")]
    ZeroGroundTruth,
    #[error("insufficient target samples: need {needed}, have {available}")]
    InsufficientTargetSamples { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Coarse grouping used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Training,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptRecord {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::ConfigMismatch(_)
            | Error::InvalidDimension(_)
            | Error::InvalidCondition(_) => {
                ErrorCategory::Config
            }
            Error::EmptySplit(_)
            | Error::Divergence { .. }
            | Error::ZeroGroundTruth
            | Error::InsufficientTargetSamples { .. }
            | Error::ShapeMismatch(_)
            | Error::LengthOverflow { .. } => ErrorCategory::Training,
            _ => ErrorCategory::Data,
        }
    }
}
