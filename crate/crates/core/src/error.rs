//! Crate-wide error type for everything above the tensor engine.

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter path: {0}")]
    MissingParam(String),
    #[error("{what}: {n} does not divide dimension {dim}")]
    Divisibility { n: usize, dim: usize, what: String },
    #[error("rank {rank} exceeds min adapted dimension {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("strategy {0} has no weight-delta form to merge")]
    NotMergeable(String),
    #[error("site {0} is not registered with this delta")]
    UnregisteredSite(String),
    #[error("token grid is not square: {tokens} patch tokens")]
    NonSquareGrid { tokens: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated payload: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("class {class} has {have} examples, need {need}")]
    InsufficientExamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("every grid cell diverged")]
    AllCellsFailed,
    #[error("dense projection size {size} exceeds cap {cap}")]
    SizeCap { size: usize, cap: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
