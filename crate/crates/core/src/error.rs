use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Errors raised by the core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AmadError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, AmadError>;

impl AmadError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AmadError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
