//! Crate-wide error type for fallible, data-driven operations.
//!
//! Programmer errors (shape mismatches inside the compute graph, indexing
//! bugs) panic with a descriptive message, mirroring the convention of the
//! mainstream array libraries. Everything driven by external data — file
//! formats, configuration values, training-time numerics — returns
//! [`Error`] so callers can map failures to exit codes.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All recoverable failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input archive, checkpoint, or report could not be read or written.
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A binary file failed structural validation (bad magic, truncated
    /// payload, checksum mismatch, inconsistent header fields).
    #[error("corrupt or unsupported file {path}: {reason}")]
    Format { path: String, reason: String },

    /// A numeric value left the finite range where the math is meaningful.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// Inputs are structurally valid but violate an operation's contract
    /// (e.g. diffusion step out of range, every frame marked bad).
    #[error("invalid input: {0}")]
    Input(String),
}

impl Error {
    /// Shorthand for a configuration error.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for an input-contract violation.
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Attach a path to an `std::io::Error`.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Shorthand for a format violation.
    pub fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
