use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("singular immersion at {0}")]
    SingularImmersion(String),
    #[error("stencil error: {0}")]
    Stencil(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("spec mismatch: {0}")]
    Spec(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("integration failed: {0}")]
    Integration(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
