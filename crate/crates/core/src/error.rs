use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside the fixed-point range for {frac_bits} fractional bits")]
    Range { value: f64, frac_bits: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid ratio {n}/{d}: {reason}")]
    InvalidRatio { n: u64, d: u64, reason: &'static str },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite value produced at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("for seed {seed}: {source}")]
    AtSeed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema violation in {artifact}: {message}")]
    Schema { artifact: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration { iteration, source: Box::new(self) }
    }

    pub(crate) fn at_seed(self, seed: u64) -> Self {
        Error::AtSeed { seed, source: Box::new(self) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// Strips iteration/seed context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } | Error::AtSeed { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Failures while reading IDX files. Each failure mode is its own variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },

    #[error("IDX dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("IDX payload truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
}
