use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps each variant family onto an
/// exit code through [`MarnError::exit_code`].
#[derive(Debug, Error)]
pub enum MarnError {
    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MarnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MarnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MarnError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            MarnError::Config(_) => 2,
            MarnError::Numeric(_) => 4,
            MarnError::Format { .. }
            | MarnError::Parse { .. }
            | MarnError::Data(_)
            | MarnError::Shape(_)
            | MarnError::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, MarnError>;
