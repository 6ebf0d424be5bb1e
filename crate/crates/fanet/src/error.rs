//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tensor does not belong to this tape")]
    DetachedTensor,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("config error: {0}")]
    ConfigValue(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for the CLI surface.
    ///
    /// 1 config, 2 data/io, 3 numerical abort, 4 checkpoint problems,
    /// 5 is reserved for gradient-check failure (set by the command).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigValue(_) | Error::Invalid(_) => 1,
            Error::Data(_) | Error::Decode { .. } | Error::Io(_) => 2,
            Error::NonFinite(_) => 3,
            Error::CorruptContainer(_) | Error::IncompatibleCheckpoint(_) => 4,
            _ => 3,
        }
    }

    /// Short category tag used in the machine-parsable error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::ConfigValue(_) | Error::Invalid(_) => "config",
            Error::Data(_) | Error::Decode { .. } | Error::Io(_) => "data",
            Error::NonFinite(_) => "numerical",
            Error::CorruptContainer(_) | Error::IncompatibleCheckpoint(_) => "checkpoint",
            _ => "numerical",
        }
    }
}
