use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid index: {0}")]
    InvalidIndex(String),
    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("stale derivative tensor: tensor is for iterate {tensor}, expected {expected}")]
    Staleness { tensor: usize, expected: usize },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("resource guard: {0}")]
    ResourceGuard(String),
    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("design error: {0}")]
    Design(String),
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
