use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("matrix {rows}x{cols} exceeds the svd size limit {limit}")]
    TooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("svd did not converge within {0} sweeps")]
    NoConverge(usize),

    #[error("softmax subset is empty")]
    EmptySubset,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: loss {loss:.6e} exceeds guard {guard:.6e}")]
    Diverged { step: usize, loss: f64, guard: f64 },

    #[error("max-margin search did not reach feasibility: {0}")]
    Infeasible(String),

    #[error("target rank {required} exceeds head dimension {available}")]
    RankExceedsHead { required: usize, available: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
