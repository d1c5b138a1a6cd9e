//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    // Embedding container errors. Each has its own variant so callers and the
    // CLI can tell them apart.
    #[error("bad magic bytes {0:?}, expected \"FASE\"")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("trailing data after payload: {0} extra bytes")]
    TrailingData(u64),

    #[error("embedding dimension is zero")]
    ZeroDim,

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("metadata sidecar mismatch: {0}")]
    Metadata(String),

    #[error("spoof-labelled record {0:?} in one-class training data")]
    SpoofInTraining(String),

    #[error("class {0} absent from scored samples")]
    MissingClass(&'static str),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("unknown attack type {0:?}")]
    UnknownAttack(String),

    #[error("protocol {protocol:?} produced an empty {split} split")]
    EmptySplit { protocol: String, split: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, found })
        }
    }
}
