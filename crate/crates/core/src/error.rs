use alloc::string::String;

/// Errors raised by the core computations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty attention support")]
    EmptyAttentionSupport,
    #[error("loss node is not a scalar (shape {0:?})")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;
