//! Error type shared across the crate.

use std::fmt;

/// All failure modes of the pipeline.
///
/// The CLI maps these onto distinct exit codes, so keep the variants coarse:
/// configuration problems, bad data, malformed files, numeric blow-ups.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimension mismatch; names the offending op and both shapes.
    Shape { op: &'static str, detail: String },
    /// Invalid argument to an operation (non-positive stride, odd d_model, ...).
    Arg(String),
    /// Model or training configuration rejected at validation time.
    Config(String),
    /// Dataset-level problem: unknown condition code, degenerate signal,
    /// single-class training fold.
    Data(String),
    /// Malformed canonical/checkpoint file, with the byte offset of the problem.
    Format { offset: u64, detail: String },
    /// Non-finite loss or gradient, clamp violation.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Arg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
