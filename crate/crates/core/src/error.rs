use thiserror::Error;

/// Errors surfaced by model construction and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group {group} has {size} observations, fewer than the required {min}")]
    EmptyGroup {
        group: usize,
        size: usize,
        min: usize,
    },

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("matrix in {0} is not positive definite")]
    NotPositiveDefinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
