use std::fmt;
use std::io;

/// Errors produced by tensor kernels, adapters, and checkpoint I/O.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Operand has the wrong number of dimensions.
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// A buffer length does not match the product of its shape.
    DataLength {
        shape: Vec<usize>,
        len: usize,
    },
    /// Invalid configuration value (unknown tag, zero rank, ...).
    Config(String),
    /// Malformed on-disk artifact.
    Format(String),
    /// A gradient or loss became NaN or infinite.
    NonFinite(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Rank { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got rank {got}")
            }
            Error::DataLength { shape, len } => {
                write!(f, "buffer of length {len} does not fit shape {shape:?}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
