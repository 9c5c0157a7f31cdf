//! Shared error type for the crate.

use std::fmt;

/// Errors surfaced by tensor math, model construction, training, kernels and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize>, op: &'static str },
    /// A tensor constructor or view received an invalid shape.
    InvalidShape { shape: Vec<usize>, reason: String },
    /// A configuration field is missing or out of range.
    Config { field: &'static str, reason: String },
    /// Input data is malformed or out of range for the model.
    Input(String),
    /// A named parameter, target or example id does not exist.
    UnknownName(String),
    /// A numeric argument lies outside its valid range.
    Range(String),
    /// A caller violated an operation's contract.
    Contract(String),
    /// A computation produced or received non-finite values.
    Numeric(String),
    /// Text input could not be parsed.
    Parse { line: usize, reason: String },
    /// A dataset is empty or otherwise unusable.
    Data(String),
    /// An input is degenerate (for example a zero-norm kernel).
    Degenerate(String),
    /// A guard against unreasonably large exact computations fired.
    Resource(String),
    /// Filesystem or serialization failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { left, right, op } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            Error::InvalidShape { shape, reason } => {
                write!(f, "invalid shape {shape:?}: {reason}")
            }
            Error::Config { field, reason } => write!(f, "invalid config field `{field}`: {reason}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::UnknownName(name) => write!(f, "unknown name: {name}"),
            Error::Range(msg) => write!(f, "out of range: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse { line, reason } => write!(f, "parse error at line {line}: {reason}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Resource(msg) => write!(f, "resource guard: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
