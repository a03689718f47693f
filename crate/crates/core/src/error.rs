use alloc::string::String;

/// Failures surfaced by the numerical engines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("kernel matrix is not positive semidefinite: min eigenvalue {min_eigenvalue:e}, norm {norm:e}")]
    NotPositiveDefinite { min_eigenvalue: f64, norm: f64 },
    #[error("window submatrix is singular or ill-conditioned: condition number {condition:e}")]
    SingularWindow { condition: f64 },
    #[error("path count would reach {count}, over the budget of {budget}; reduce the number of steps or the dimension")]
    PathBudgetExceeded { count: u128, budget: usize },
    #[error("importance weights are degenerate: effective sample size {ess:.3} < {minimum}")]
    DegenerateWeights { ess: f64, minimum: f64 },
    #[error("window {start}..{end} is not valid here (grid has {n_steps} steps)")]
    InvalidWindow {
        start: usize,
        end: usize,
        n_steps: usize,
    },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
