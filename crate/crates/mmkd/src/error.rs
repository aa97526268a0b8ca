//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, MmkdError>;

#[derive(Debug, Error)]
pub enum MmkdError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (bad magic, truncated payload, ...).
    #[error("format error in {path}: {field}: {msg}")]
    Format {
        path: PathBuf,
        /// Name of the offending field, e.g. "magic" or "payload length".
        field: String,
        msg: String,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or spec values.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint incompatible with the requesting context.
    #[error("checkpoint incompatible: field {field}: {msg}")]
    Incompatible { field: String, msg: String },

    #[error("unknown case name: {0}")]
    UnknownCase(String),

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A metric is undefined on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Report comparison failure.
    #[error("comparison error: {0}")]
    Comparison(String),
}

impl MmkdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmkdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, field: &str, msg: impl Into<String>) -> Self {
        MmkdError::Format {
            path: path.into(),
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    /// CLI process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmkdError::Config(_) | MmkdError::Contract(_) | MmkdError::Incompatible { .. } => 2,
            MmkdError::Divergence(_) => 3,
            MmkdError::Io { .. } | MmkdError::Format { .. } => 4,
            _ => 1,
        }
    }
}
