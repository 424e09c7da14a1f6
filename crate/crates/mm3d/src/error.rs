use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch}, case {case}: {message}")]
    Diverged {
        epoch: usize,
        case: usize,
        message: String,
    },

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl MmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        MmError::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code contract: 1 for validation errors, 2 for runtime
    /// and numeric errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmError::Config(_) | MmError::Dataset(_) | MmError::ShapeMismatch { .. } => 1,
            MmError::Io { .. }
            | MmError::Format { .. }
            | MmError::Diverged { .. }
            | MmError::Eval(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmError>;
