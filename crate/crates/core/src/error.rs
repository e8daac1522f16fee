use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },

    #[error("planning error: {0}")]
    Planning(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("sampling error at diffusion step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    #[error("training aborted at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
