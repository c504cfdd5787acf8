use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside `scp-core`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): expected {expected}, got {actual}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called before forward (node {0} has no value)")]
    NotEvaluated(usize),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("channel width mismatch: {0}")]
    ChannelMismatch(String),

    #[error("expert count mismatch: pool has {pool}, weights have {weights}")]
    ExpertCountMismatch { pool: usize, weights: usize },

    #[error("frame size {height}x{width} is not divisible by {block}")]
    NotDivisible {
        height: usize,
        width: usize,
        block: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inverted box [{x0}, {y0}, {x1}, {y1}]")]
    InvertedBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("empty sequence")]
    EmptySequence,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-binary value {value} in {context}")]
    NonBinary { value: f64, context: String },

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: checksum mismatch (expected {expected:016x}, got {actual:016x})")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("non-finite gradient at step {step} for `{param}` (norm {norm})")]
    NonFiniteGradient { step: u64, param: String, norm: f64 },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
