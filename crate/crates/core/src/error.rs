//! Crate-wide error and result types.

use thiserror::Error;

/// Errors produced by construction, estimation, simulation, and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched vector or matrix dimensions.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Arguments outside the documented domain of an operation.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A factorization or solve failed, usually a degenerate design or kernel matrix.
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    /// A computation left the finite floating-point range.
    #[error("numerical failure: {0}")]
    NonFinite(String),
    /// Optimizer could not reach the requested tolerances.
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
