use std::path::{Path, PathBuf};

use kpt_tensor::TensorError;

pub type Result<T, E = KptError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum KptError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scene generation failed after {tries} rejection tries")]
    GenerationFailure { tries: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: file has version {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated record {record}: file ends before the record is complete")]
    Truncated { record: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite loss in term {term}")]
    NonFiniteLoss { term: String },
}

impl KptError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        KptError::Io { path: path.to_path_buf(), source }
    }
}
