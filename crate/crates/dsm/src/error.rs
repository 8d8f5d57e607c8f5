use std::io;
use std::path::PathBuf;

/// Why a checkpoint could not be loaded.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("manifest is not valid: {0}")]
    Manifest(String),
    #[error("checksum mismatch in tensor {0}")]
    Checksum(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
    #[error(transparent)]
    Core(#[from] dsm_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code of the error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Core(dsm_core::Error::Config(_)) => 3,
            Error::Acceptance(_) => 5,
            _ => 4,
        }
    }
}
