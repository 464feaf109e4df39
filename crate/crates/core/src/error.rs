use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DtmlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DtmlError {
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("normalization mismatch: {0}")]
    NormalizationMismatch(String),

    #[error("invalid architecture descriptor: {0}")]
    InvalidDescriptor(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error("crop {crop:?} does not fit volume {volume:?}")]
    CropTooLarge { crop: [usize; 3], volume: [usize; 3] },

    #[error("training diverged at iteration {iteration}: {reason}")]
    FatalDivergence { iteration: usize, reason: String },

    #[error("I/O failure at {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

impl DtmlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DtmlError::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        DtmlError::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
