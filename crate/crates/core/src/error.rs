use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("event stream is empty")]
    EmptyStream,

    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds { x: u32, y: u32, width: u16, height: u16 },

    #[error("segment {index} of {count} contains no events")]
    DegenerateSegment { index: usize, count: usize },

    #[error("stream duration is zero (first and last timestamp are both {0})")]
    DegenerateDuration(u64),

    #[error("scene produced no events")]
    EmptySynthesis,

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("need at least {needed} voxels for k-NN, got {available}")]
    InsufficientVoxels { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::ConfigMismatch(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}
