use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called in a way its contract forbids (non-scalar loss,
    /// second backward pass, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// An input violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("training failed (seed {seed}, step {step}): {reason}")]
    Training { seed: u64, step: usize, reason: String },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("config validation failed:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Reasons a binary file (tensor, scene set, checkpoint, report) failed to load.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("config digest mismatch: file has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) | Error::Validation(_) => 2,
            _ => 3,
        }
    }
}
