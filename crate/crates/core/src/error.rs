use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the embedding store reader and writer.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected \"SPE1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: expected 1, found {0}")]
    Version(u32),
    #[error("truncated store: {0}")]
    Truncated(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("inconsistent sentences: {0}")]
    Inconsistent(String),
    #[error("sentence id {0} not present in store")]
    MissingSentence(u64),
    #[error("cannot open store {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache does not match the {0} operation it was passed to")]
    CacheMismatch(&'static str),
    #[error("unknown span method {0:?} (expected avg|attn|max|endpoint|diffsum|coherent)")]
    UnknownMethod(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid coherent split for dimension {dim}: {reason}")]
    InvalidSplit { dim: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("gradient check failed\n{0}")]
    GradCheck(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
