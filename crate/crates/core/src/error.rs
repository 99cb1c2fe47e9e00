use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("non-finite value at index ({row}, {col}) in {context}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error(
        "patch of shape {shape:?} at offset {pos:?} does not fit inside a {bounds:?} grid"
    )]
    OutOfBounds {
        pos: (usize, usize),
        shape: (usize, usize),
        bounds: (usize, usize),
    },

    #[error("negative measured intensity {value} in pattern {pattern} at ({row}, {col})")]
    NegativeIntensity {
        pattern: usize,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty minibatch")]
    EmptyBatch,

    #[error("all diffraction patterns are zero; cannot initialize the probe")]
    ZeroData,

    #[error("baseline curve has zero range; epsilon is undefined")]
    ZeroRange,

    #[error("fast-forward operator was already applied in this run")]
    AlreadyApplied,

    #[error("input size {height}x{width} is not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("backward pass requested without a matching forward cache")]
    MissingCache,

    #[error("non-finite loss at {stage} {index}")]
    Diverged { stage: &'static str, index: usize },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
