use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the pipeline. `Config` and `OutOfRange` indicate bad
/// inputs or settings (CLI exit code 1); the rest are runtime failures
/// (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A ground-truth heatmap whose support truncated to nothing. The caller
    /// decides whether to skip the sample or abort.
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("non-finite gradient in block '{block}' (batch index {batch_index})")]
    NonFiniteGradient { block: String, batch_index: usize },

    #[error("environment fault: {0}")]
    EnvFault(String),

    #[error("malformed {format} data in {path}: {reason}")]
    Format {
        format: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn out_of_range(msg: impl Into<String>) -> Self {
        Error::OutOfRange(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by invalid inputs/settings rather than runtime faults.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::OutOfRange(_) | Error::Format { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
