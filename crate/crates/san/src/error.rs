//! Crate-wide error type and the process exit codes derived from it.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or rejected run configuration (unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// Generic dataset or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// A file referenced by a manifest does not exist.
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    /// A decoded file does not have the size the manifest declares.
    #[error("size mismatch in {path}: expected {expected}, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    /// A parsing map contains a label outside `[0, labels)`.
    #[error("label {label} out of range (labels={labels}) at pixel ({x},{y}) in {context}")]
    LabelOutOfRange {
        label: usize,
        labels: usize,
        x: usize,
        y: usize,
        context: String,
    },

    /// A mask file holds values other than 0 and 255.
    #[error("mask is not binary: {path} (value {value})")]
    MaskNotBinary { path: PathBuf, value: u8 },

    /// An identity appears in both the train and test splits.
    #[error("identity {identity} appears in both train and test splits")]
    SplitOverlap { identity: String },

    /// Pair construction found no identity with two or more poses.
    #[error("no identity has at least two poses; cannot build pairs")]
    NoPairs,

    /// Tensor arguments with incompatible shapes.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite value in term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    /// Numerical failure outside training (eigendecomposition, matrix sqrt).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::MissingFile { .. }
            | Error::SizeMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::MaskNotBinary { .. }
            | Error::SplitOverlap { .. }
            | Error::NoPairs
            | Error::ShapeMismatch { .. } => 3,
            Error::NonFinite { .. } | Error::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
