use thiserror::Error;

/// Failure modes shared by every module.
///
/// `Validation` means the input is malformed; `Infeasible` means the input is
/// well-formed but the requested construction cannot be carried out (for
/// example a direction set whose splitting number is below the pruning
/// threshold).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("infeasible instance: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
