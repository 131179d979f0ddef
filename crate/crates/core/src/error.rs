use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape { op: &'static str, detail: String },
    /// A masked operation was asked to work on a row with no valid entry.
    DegenerateMask { op: &'static str },
    /// An operation produced NaN or an infinity.
    NonFinite { op: &'static str },
    /// A precondition of the called operation does not hold.
    Contract(String),
    /// More items were requested than are available.
    Capacity {
        what: &'static str,
        requested: usize,
        available: usize,
    },
    /// Scene generation could not satisfy its placement constraints.
    Generation(String),
    /// An evaluation protocol cannot be applied to the given split.
    Protocol(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::DegenerateMask { op } => write!(f, "{op}: every entry of a row is masked"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Capacity {
                what,
                requested,
                available,
            } => write!(f, "{what}: requested {requested} but only {available} available"),
            Error::Generation(msg) => write!(f, "scene generation failed: {msg}"),
            Error::Protocol(msg) => write!(f, "evaluation protocol error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}
