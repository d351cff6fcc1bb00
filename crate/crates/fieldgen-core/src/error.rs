//! Crate-level error taxonomy.
//!
//! Categories map onto process exit codes at the CLI boundary: configuration
//! problems, data/IO problems, and numeric failures.

use thiserror::Error;

use crate::boundary::DataError;
use crate::fdtd::FdtdError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FieldgenError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fdtd(#[from] FdtdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FieldgenError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FieldgenError::Config(_) => 2,
            FieldgenError::Data(_) | FieldgenError::Io(_) => 3,
            FieldgenError::Fdtd(FdtdError::Config(_)) => 2,
            FieldgenError::Fdtd(_) => 4,
            FieldgenError::Tensor(_) | FieldgenError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, FieldgenError>;
