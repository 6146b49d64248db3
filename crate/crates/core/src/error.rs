use thiserror::Error;

/// Errors raised by tensor operations and the model components built on them.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, empty
    /// input list, invalid box, ...).
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// An operation was asked for a configuration it does not support.
    #[error("{op}: unsupported configuration: {msg}")]
    Config { op: &'static str, msg: String },

    /// A forward pass produced NaN or Inf.
    #[error("{op}: non-finite values in output")]
    NonFinite { op: &'static str },
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
