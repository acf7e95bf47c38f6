use thiserror::Error;

/// Failures of the dense linear-algebra and optimization kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("matrix is singular (pivot {pivot})")]
    Singular { pivot: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is not symmetric tridiagonal at ({row}, {col})")]
    NotTridiagonal { row: usize, col: usize },
    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}
