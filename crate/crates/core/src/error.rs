use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::container::ContainerError;

/// Crate-wide error type.
///
/// Domain errors are violated preconditions (bad shapes, out-of-range
/// indexes, invalid configuration). I/O and container errors come from the
/// persistence layer.
#[derive(Debug, Error)]
pub enum TpaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl TpaError {
    pub fn domain(msg: impl Into<String>) -> Self {
        TpaError::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        TpaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            TpaError::Io { .. } => true,
            TpaError::Container(c) => matches!(c, ContainerError::Io(_)),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, TpaError>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::TpaError::Domain(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
