use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown differentiable function `{0}`")]
    UnknownFunction(String),

    #[error("role/modality mismatch: {0}")]
    RoleMismatch(String),

    #[error("unknown block {block} (stream has {available} blocks)")]
    UnknownBlock { block: usize, available: usize },

    #[error("unknown code {code} for {vocab} (vocabulary size {size})")]
    UnknownCode {
        vocab: &'static str,
        code: usize,
        size: usize,
    },

    #[error("guidance pass {0} is required by an active scale but was not provided")]
    MissingPass(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("zero-norm projection in {0}")]
    ZeroNorm(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {0}")]
    CorruptHeader(String),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint does not fit model: {0}")]
    CheckpointShape(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI. Checkpoint failures get distinct codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::CorruptHeader(_) => 4,
            Error::VersionMismatch { .. } => 5,
            Error::CheckpointShape(_) => 6,
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            _ => 1,
        }
    }
}
