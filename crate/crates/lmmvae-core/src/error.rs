use alloc::string::String;
use core::fmt;

/// Errors produced by model fitting, design construction and metric code.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand dimensions do not chain.
    Shape(String),
    /// A parameter is outside its valid range (negative variance, zero terms, ...).
    InvalidArgument(String),
    /// A matrix factorization failed even after jitter stabilization.
    Singular(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Singular(msg) => write!(f, "singular matrix: {msg}"),
            Error::Diverged { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
