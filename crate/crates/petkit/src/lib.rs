//! IO, configuration and orchestration around `petkit-core`.
//!
//! This crate carries everything that touches the filesystem or the clock:
//! the binary checkpoint and dataset container formats, feature dumps, the
//! run configuration format, metrics/report writers, and the command
//! implementations behind the `petkit` binary.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod metrics;
pub mod run;

use std::fmt;

/// Errors from file formats and run orchestration.
#[derive(Debug)]
pub enum Error {
    Io(std::io::Error),
    /// Malformed file contents; carries the byte offset where parsing failed.
    Format { offset: u64, detail: String },
    /// Invalid run configuration; carries a line number when known.
    Config { line: Option<usize>, detail: String },
    Core(petkit_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { offset, detail } => {
                write!(f, "malformed file at byte {offset}: {detail}")
            }
            Error::Config { line: Some(l), detail } => {
                write!(f, "config error at line {l}: {detail}")
            }
            Error::Config { line: None, detail } => write!(f, "config error: {detail}"),
            Error::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<petkit_core::Error> for Error {
    fn from(e: petkit_core::Error) -> Self {
        Error::Core(e)
    }
}
