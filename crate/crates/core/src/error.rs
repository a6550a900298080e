use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

/// Failures raised by tensor operators and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape} needs {expected} values, got {actual}")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    Mismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: resulting {dim} would be {value}")]
    NonPositiveOutput {
        op: &'static str,
        dim: &'static str,
        value: i64,
    },
    #[error("{op}: empty spatial extent")]
    EmptySpatial { op: &'static str },
    #[error("expected a scalar tensor, got {0}")]
    NotScalar(Shape),
    #[error("channel slice [{start}, {start}+{len}) outside {channels} channels")]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },
    #[error("graph node {node} consumes node {input}, which is not earlier in the tape")]
    GraphOrder { node: usize, input: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

/// Errors from network construction, training, persistence and data handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("invalid block spec: {0}")]
    BlockSpec(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("frame resolution {actual} does not match configured resolution {expected}")]
    Resolution { expected: usize, actual: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("transfer of `{name}` failed: source {source_shape}, target {target_shape}")]
    TransferShape {
        name: String,
        source_shape: Shape,
        target_shape: Shape,
    },
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("sample {clip}/{frame} has no {branch} teacher map but mu > 0")]
    MissingTeacher {
        clip: String,
        frame: usize,
        branch: &'static str,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {message} (at byte {offset})")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
