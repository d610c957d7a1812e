use thiserror::Error;

/// Errors produced by the simulator and its components.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("datastore is empty")]
    EmptyStore,

    #[error("neighborhood is empty")]
    EmptyNeighborhood,

    #[error("client {client} has {count} samples, at least 3 are required")]
    DegenerateClient { client: usize, count: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FedError::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FedError::Input(msg.into()))
}
