use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a train-mode graph")]
    EvalGraphBackward,

    #[error("loss node must hold a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0} requires a train-mode graph")]
    ModeMismatch(String),

    #[error("non-finite gradient in parameter `{0}`; step rejected")]
    NonFiniteGradient(String),

    #[error("parameter `{0}` became non-finite after an update")]
    NonFiniteParameter(String),

    #[error("non-finite instability score for sample {0}")]
    NonFiniteScore(usize),

    #[error("non-finite loss at {stage} (step {step})")]
    Divergence { stage: String, step: usize },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("gradient check rejected: forward is not deterministic ({0})")]
    NondeterministicForward(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("checksum mismatch for {file}: manifest says {expected}, payload hashes to {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("bad magic in {what}: expected {expected:?}")]
    Magic { what: String, expected: String },

    #[error("truncated or malformed {what}: {detail}")]
    Truncated { what: String, detail: String },

    #[error("pixel value {value} at index {index} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },

    #[error("malformed sequence group {group}: {detail}")]
    MalformedGroup { group: usize, detail: String },

    #[error("missing {0}")]
    Missing(String),

    #[error("not a probability vector: {0}")]
    NotAProbability(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
