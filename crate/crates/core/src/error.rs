use thiserror::Error;

/// Errors produced by the planning library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("capacity exceeded: {tracks} tracked objects but only {robots} robots")]
    Capacity { tracks: usize, robots: usize },

    #[error("infeasible assignment: {0}")]
    InfeasibleAssignment(String),

    #[error("infeasible path: {0}")]
    InfeasiblePath(String),

    #[error("riccati recursion did not converge after {iterations} iterations (residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
