use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error at t={t}, k={k}, eta={eta}: radicand {radicand:e} is negative")]
    NumericDomain {
        t: usize,
        k: usize,
        eta: f64,
        radicand: f64,
    },

    #[error("input too large: {0}")]
    TooLarge(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record filtered: {0}")]
    Filtered(String),

    #[error("residue {residue} has no C4' atom")]
    MissingAtom { residue: String },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Diverged,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Precondition(_) => ErrorCategory::Config,
            Error::Parse { .. }
            | Error::Filtered(_)
            | Error::MissingAtom { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::TooLarge(_) => ErrorCategory::Data,
            Error::InvalidArgument(_)
            | Error::NumericDomain { .. }
            | Error::Degenerate(_)
            | Error::UndefinedMetric(_) => ErrorCategory::Numeric,
            Error::Diverged { .. } => ErrorCategory::Diverged,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
