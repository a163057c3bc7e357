//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FwError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument is out of range or otherwise unusable.
    #[error("invalid argument: {0}")]
    Arg(String),
    /// A model configuration fails validation.
    #[error("bad config: {0}")]
    Config(String),
    /// A file is not in the expected binary format.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced non-finite values or diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FwError>;

/// Shorthand for building a shape error from any formatted message.
macro_rules! shape_err {
    ($($arg:tt)*) => {
        return Err($crate::error::FwError::Shape(format!($($arg)*)))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        return Err($crate::error::FwError::Arg(format!($($arg)*)))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        return Err($crate::error::FwError::Config(format!($($arg)*)))
    };
}

macro_rules! format_err {
    ($($arg:tt)*) => {
        return Err($crate::error::FwError::Format(format!($($arg)*)))
    };
}

pub(crate) use {arg_err, config_err, format_err, shape_err};
