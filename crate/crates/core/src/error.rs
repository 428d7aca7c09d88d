use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate gradient-check point: {0}")]
    DegeneratePoint(String),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint record `{name}` has shape {found:?}, architecture expects {expected:?}")]
    RecordShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("propagation state mismatch: {0}")]
    State(String),

    #[error("slice {index}: {message}")]
    Slice { index: usize, message: String },

    #[error("stack data: {0}")]
    Data(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("experiment spec: {0}")]
    Spec(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
