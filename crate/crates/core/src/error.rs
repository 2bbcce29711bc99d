use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AorError>;

#[derive(Debug, Error)]
pub enum AorError {
    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("duplicate id: {0}")]
    Duplicate(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("time {t} s outside horizon [{start}, {end})")]
    Horizon { t: f64, start: f64, end: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AorError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AorError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        AorError::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AorError::Io { .. } => 3,
            AorError::NonConvergence(_) => 2,
            _ => 1,
        }
    }
}
