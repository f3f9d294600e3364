use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why an image file could not be turned into a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeReason {
    #[error("unsupported bit depth ({0} bits per channel, only 8 is supported)")]
    UnsupportedBitDepth(u16),
    #[error("{0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown layer tag `{0}`")]
    UnknownTag(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("cannot decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: DecodeReason },

    #[error("optimizer made no progress: total loss {initial} at first step, {last} at last step")]
    StepSize { initial: f64, last: f64 },

    #[error("adverse pool holds {available} images but {needed} are required")]
    InsufficientPool { needed: usize, available: usize },

    #[error("empty test set: {0}")]
    EmptyTestSet(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::StepSize { .. } | Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
