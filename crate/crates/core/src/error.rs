use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine reports. Variants map one-to-one onto the
/// error classes callers are expected to distinguish (and onto CLI exit codes).
#[derive(Debug, Error)]
pub enum CalipError {
    #[error("dimension error in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("parameter error: {name} {reason}")]
    Parameter { name: String, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("integrity error at byte {offset}: {reason}")]
    Integrity { offset: u64, reason: String },

    #[error("truncated file: expected {expected} bytes, found {actual} (first missing byte at offset {actual})")]
    Truncated { expected: u64, actual: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("no such file: {}", .0.display())]
    NotFound(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CalipError {
    pub(crate) fn dim(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        CalipError::Dimension {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        CalipError::Parameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CalipError::NotFound(path.to_path_buf())
        } else {
            CalipError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// Byte offset for errors raised while decoding a file.
    pub fn offset(&self) -> Option<u64> {
        match self {
            CalipError::Format { offset, .. } | CalipError::Integrity { offset, .. } => {
                Some(*offset)
            }
            CalipError::Truncated { actual, .. } => Some(*actual),
            _ => None,
        }
    }
}

pub type Result<T, E = CalipError> = std::result::Result<T, E>;
