use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} label {label:?}; admissible labels: {admissible}")]
    Category {
        kind: &'static str,
        label: String,
        admissible: String,
    },

    #[error("irregular cadence: {0}")]
    Cadence(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("incompatible format version: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("misaligned case sets; missing case ids: {}", .0.join(", "))]
    Misaligned(Vec<String>),

    #[error("inconsistent case counts: {0}")]
    CaseCount(String),

    #[error("missing cube frame for storm {storm_id} at {time}")]
    MissingCube { storm_id: String, time: String },

    #[error("split leakage: case {case_id} is tagged {found}, expected {expected}")]
    Leakage {
        case_id: String,
        found: String,
        expected: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
