//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors emitted by tensor, model and analysis routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents incompatible with an operation; names the offending axes.
    Shape { op: &'static str, detail: String },
    /// A structural configuration is invalid (divisibility, channel chains, ...).
    Config(String),
    /// An operation contract was violated (e.g. backward on a non-scalar loss).
    Contract(String),
    /// Dataset contents are invalid or insufficient.
    Data(String),
    /// A non-finite value was produced where finiteness is required.
    NonFinite { what: String },
    /// A quantity is mathematically undefined for the given input
    /// (e.g. CKA of an all-constant matrix, median bandwidth of identical points).
    Degenerate(String),
    /// Two checkpoints/parameter sets cannot be compared.
    Incompatible(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Degenerate(msg) => write!(f, "undefined: {msg}"),
            Error::Incompatible(msg) => write!(f, "incompatible inputs: {msg}"),
        }
    }
}
