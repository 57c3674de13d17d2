use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A scalar parameter is outside its domain (non-positive scale, empty interval, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Reports or histograms do not have the shape the caller promised.
    #[error("malformed input: {0}")]
    MalformedInput(String),

    /// The protocol configuration cannot be realized (too few users, wrong mode, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A replayed analyst computation disagrees with the recorded value.
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
