use thiserror::Error;

/// Errors raised by the laboratory's numerical and training routines.
#[derive(Debug, Error)]
pub enum WeftError {
    #[error("time {0} outside the admissible domain")]
    TimeOutOfRange(f64),
    #[error("rate must be nonnegative and finite, got {0}")]
    InvalidRate(f64),
    #[error("rate matrix is not a conservative generator: {0}")]
    NonConservative(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension guard: {0}")]
    TooLarge(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WeftError>;
