use std::path::PathBuf;

use crate::network::FilterRef;

/// Errors raised by the compute engine, loaders, model store and pruning loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid filter reference: layer {layer}, filter {filter}: {reason}")]
    InvalidFilter {
        layer: usize,
        filter: usize,
        reason: String,
    },

    #[error("layer {0} is not a conv2d layer")]
    NotConv(usize),

    #[error("layer {0} has no parameterized successor")]
    NoSuccessor(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} at sample {index} is out of range for {class_count} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },

    #[error("training diverged: non-finite loss {0}")]
    Divergence(f32),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(String),

    #[error("truncated blob: manifest needs {expected} bytes, file has {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("mask would remove every filter of layer {0}")]
    EmptiedLayer(usize),

    #[error("network has zero parameters")]
    ZeroParameters,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inconsistent trace: {0}")]
    InconsistentTrace(String),

    #[error("filter {0} not present in table")]
    MissingFilter(FilterRef),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
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

pub type Result<T> = std::result::Result<T, Error>;
