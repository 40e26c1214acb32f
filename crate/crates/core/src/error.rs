use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// A pixel whose likelihood vector is identically zero.
    #[error("degenerate likelihood at pixel {pixel}: zero probability under every class")]
    DegenerateLikelihood { pixel: usize },

    #[error("objective undefined at pixel {pixel}: p_i^T z_i = {value} is not positive")]
    InfeasibleEvaluation { pixel: usize, value: f64 },

    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),

    #[error("no evaluable pixels (all ground truth unlabeled or excluded)")]
    EmptyEvaluation,

    #[error("invalid header at byte offset {offset}: {reason}")]
    InvalidHeader { offset: usize, reason: String },

    #[error("magic mismatch at byte offset {offset}: expected {expected:?}, found {found:?}")]
    MagicMismatch {
        offset: usize,
        expected: &'static str,
        found: String,
    },

    #[error("truncated file: payload starting at byte offset {offset} needs {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("trailing data after payload at byte offset {offset}")]
    TrailingData { offset: usize },

    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("line {line}: pixel ({row}, {col}) outside {height}x{width} grid")]
    IndexOutOfRange {
        line: u64,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("{0} labels exceed the palette size {1}")]
    PaletteTooSmall(usize, usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
