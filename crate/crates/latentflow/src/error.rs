use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?} in {context}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory length {len} not divisible by chunk length {chunk}")]
    ChunkMismatch { len: usize, chunk: usize },

    #[error("workspace crop produced an empty point cloud")]
    EmptyCrop,

    #[error("scene generation failed: {0}")]
    InfeasibleScene(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint config hash mismatch: stored {stored}, recomputed {actual}")]
    ConfigHashMismatch { stored: String, actual: String },

    #[error("frozen weights changed during stage-2 training: hash {expected} -> {actual}")]
    FrozenWeightsChanged { expected: String, actual: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("demonstration file: {0}")]
    DemoFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
