//! CLI error type carrying the process exit code:
//! 2 usage, 3 data, 4 numerical.

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            exit_code: 3,
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            exit_code: 4,
        }
    }

    pub fn from_csv(e: csv::Error) -> Self {
        Self::data(format!("CSV error: {e}"))
    }

    pub fn from_core(e: envmix::Error) -> Self {
        match e {
            envmix::Error::DimensionMismatch { .. } | envmix::Error::InvalidArgument(_) => {
                Self::data(e.to_string())
            }
            envmix::Error::EmptyGroup { .. }
            | envmix::Error::Singular(_)
            | envmix::Error::NotPositiveDefinite(_) => Self::numerical(e.to_string()),
        }
    }
}
