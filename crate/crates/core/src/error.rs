use std::fmt;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: Axis,
        detail: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("mask area fraction {0:.4} is outside the evaluated protocol range [0, 0.6]")]
    OutOfProtocol(f64),
    #[error("non-finite loss at step {step}; last good checkpoint: {last_good}")]
    NonFinite { step: usize, last_good: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Names the axis a shape error is about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axis {
    Index(usize),
    Rank,
    Named(&'static str),
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Index(i) => write!(f, "axis {i}"),
            Axis::Rank => write!(f, "rank"),
            Axis::Named(n) => write!(f, "axis `{n}`"),
        }
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: Axis, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
