use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?} found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {found} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("label {label} exceeds label count {label_count}")]
    LabelOutOfRange { label: u32, label_count: u32 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("region for label {label} is empty")]
    EmptyRegion { label: u8 },

    #[error("background pool too small: need {needed}, have {available}")]
    BackgroundPoolTooSmall { needed: usize, available: usize },

    #[error("label {label} has {size} pixels, need at least 2 for positive pairs")]
    RegionTooSmall { label: u8, size: usize },

    #[error("no admissible negative partner for label {label} at offset {offset}")]
    NoAdmissibleNegative { label: u8, offset: usize },

    #[error("class {class} has no training examples")]
    MissingClass { class: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {message}")]
    Malformed { what: &'static str, message: String },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by input files or their contents rather than the
    /// computation itself.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes { .. }
            | Error::NonFinite { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Malformed { .. } => true,
            Error::Stage { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
