use thiserror::Error;

/// Errors produced by the monitoring engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out-of-order event: expected index {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("permutation oracle supports at most {max} points, got {points}")]
    ComplexityGuard { points: usize, max: usize },

    #[error("monitor halted after alarm at t={0}")]
    Halted(u64),

    #[error("snapshot restore failed: {0}")]
    Restore(String),

    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
