use thiserror::Error;

use crate::losses::LossReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFiniteLoss { term: String, report: Box<LossReport> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure came from bad inputs rather than the environment
    /// or the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Load(_)
                | Error::Unsupported(_)
                | Error::Checkpoint(_)
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
