use alloc::string::String;
use core::fmt;

/// Failure categories shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates an operation precondition.
    Argument(String),
    /// A model or training configuration is internally inconsistent.
    Config(String),
    /// A computation produced or received a non-finite or degenerate value.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! arg_err {
    ($($t:tt)*) => { $crate::error::Error::Argument(alloc::format!($($t)*)) };
}
macro_rules! config_err {
    ($($t:tt)*) => { $crate::error::Error::Config(alloc::format!($($t)*)) };
}
macro_rules! numeric_err {
    ($($t:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($t)*)) };
}
pub(crate) use {arg_err, config_err, numeric_err};
