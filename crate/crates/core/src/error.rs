use thiserror::Error;

/// Errors raised by model fitting, estimation and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factorization failed for {context}: matrix is not positive definite (min eigenvalue estimate {min_eigenvalue:.3e})")]
    Factorization { context: &'static str, min_eigenvalue: f64 },

    #[error("empty concurrently eligible set for arms ({j}, {k})")]
    EmptyEce { j: usize, k: usize },

    #[error("invalid outcome: {0}")]
    InvalidOutcome(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("empty arm: {0}")]
    EmptyArm(String),

    #[error("data are not nested: {0}")]
    NotNested(String),

    #[error("truth does not match the fitted model: {0}")]
    TruthMismatch(String),
}

pub type Result<T> = std::result::Result<T, GpError>;
