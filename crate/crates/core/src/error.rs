use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto configuration, data, and numerical failure classes.
#[derive(Debug, Error)]
pub enum FloodError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient history: timestep {t} needs {p} earlier states")]
    InsufficientHistory { t: usize, p: usize },

    #[error("horizon {horizon} from timestep {start} exceeds event of {num_steps} states")]
    HorizonExceedsEvent {
        start: usize,
        horizon: usize,
        num_steps: usize,
    },

    #[error("corrupt container at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: String, expected: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl FloodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FloodError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        FloodError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        FloodError::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FloodError::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the on-disk data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            FloodError::Corrupt { .. }
                | FloodError::UnsupportedVersion { .. }
                | FloodError::Schema(_)
                | FloodError::Shape(_)
                | FloodError::Io { .. }
                | FloodError::Json { .. }
                | FloodError::Csv { .. }
        )
    }
}

pub type Result<T, E = FloodError> = std::result::Result<T, E>;
