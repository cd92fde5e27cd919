use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("checksum mismatch for {file}: manifest {expected:08x}, file {actual:08x}")]
    Checksum { file: String, expected: u32, actual: u32 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("label out of range: {0}")]
    Label(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
