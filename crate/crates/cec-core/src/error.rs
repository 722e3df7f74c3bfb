//! Error taxonomy shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CecError {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A numeric parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A mode was selected without the weights it requires.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// Labels or dataset contents are invalid.
    #[error("data error: {0}")]
    Data(String),
    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// Training produced a non-finite loss.
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A checkpoint or config file is malformed.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CecError>;
