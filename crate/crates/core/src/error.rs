use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` holds a non-finite value")]
    NonFiniteParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown anatomy label `{0}`")]
    UnknownLabel(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("beam width must be at least 1")]
    BeamWidth,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("truncated blob: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed data: {0}")]
    Data(String),
    #[error("unknown example id `{0}`")]
    UnknownExample(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
