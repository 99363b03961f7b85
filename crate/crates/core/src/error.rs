//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpssError {
    /// Parameter outside its mathematical domain (bad exponent, non-positive
    /// shape, dimension too small, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally degenerate input (zero vector where a direction is
    /// required, empty dataset, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Configuration rejected before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (bad file format, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A floating-point computation left its valid range and the result
    /// cannot be trusted.
    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LpssError>;

impl LpssError {
    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// runtime/numerics failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LpssError::Domain(_)
            | LpssError::Degenerate(_)
            | LpssError::Config(_)
            | LpssError::Data(_) => 1,
            LpssError::Numerics(_) | LpssError::Io(_) => 2,
        }
    }
}
