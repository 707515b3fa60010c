use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("vectors live in incompatible discrete spaces")]
    IncompatibleSpace,

    #[error("retained set has rank zero")]
    RankZero,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("reconstruction is ill-posed at n = {n}: beta = {beta:e}")]
    IllPosed { n: usize, beta: f64 },

    #[error("({phase:.4} s, {hr:.2} bpm) is not covered by any window; nearest cell is {nearest:?}")]
    OutOfCoverage {
        phase: f64,
        hr: f64,
        nearest: Option<(usize, usize)>,
    },

    #[error("snapshot {0} falls outside every partition window")]
    PartitionCoverage(usize),

    #[error("no admissible dictionary element left to select")]
    SelectionExhausted,

    #[error("{0}")]
    Degenerate(String),

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed CSV in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
