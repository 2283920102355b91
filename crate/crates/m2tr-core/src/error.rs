use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the numeric stack, data pipeline, and harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    Shape(String),
    /// An autodiff or loss contract was violated (e.g. non-scalar loss).
    Contract(String),
    /// Invalid configuration or model construction parameters.
    Config(String),
    /// Broken dataset, file format, or label consistency.
    Data(String),
    /// Numeric failure: non-finite values, failed gradient check, degenerate input.
    Numeric(String),
    /// Underlying I/O failure, flattened to a message.
    Io(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Shape(_) => 3,
            Error::Numeric(_) | Error::Contract(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
