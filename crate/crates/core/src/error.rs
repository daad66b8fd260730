use alloc::string::String;
use core::fmt;

/// Failure modes shared by every layer of the stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape(String),
    /// A configuration value is out of its valid range.
    Config(String),
    /// A caller broke an API contract (non-scalar loss, missing sample, ...).
    Contract(String),
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
    /// Retrieval evaluation could not be carried out.
    Evaluation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Evaluation(m) => write!(f, "evaluation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
