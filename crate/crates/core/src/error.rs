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

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("record `{record}` references unknown {kind} key `{key}`")]
    DanglingKey {
        record: String,
        kind: &'static str,
        key: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mesh has zero total surface area")]
    DegenerateMesh,

    #[error("shape `{0}` has no text candidates in any category")]
    TextLess(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("row {row} of {matrix} is not unit-norm (norm {norm})")]
    NonUnitRow {
        matrix: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("need at least {needed} shapes, only {available} available")]
    TooFewShapes { needed: usize, available: usize },

    #[error("class `{label}` has {available} examples, {needed} required")]
    InsufficientExamples {
        label: String,
        needed: usize,
        available: usize,
    },

    #[error("no ground-truth label for `{0}`")]
    MissingLabel(String),

    #[error("checkpoint layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable code, used in structured CLI and service errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Corrupt { .. } => "corrupt_file",
            Error::DanglingKey { .. } => "dangling_key",
            Error::DimensionMismatch { .. } => "dim_mismatch",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownId(_) => "unknown_id",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DegenerateMesh => "degenerate_mesh",
            Error::TextLess(_) => "text_less",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonUnitRow { .. } => "non_unit_row",
            Error::InvalidTemperature(_) => "invalid_temperature",
            Error::NonFinite(_) => "non_finite",
            Error::TooFewShapes { .. } => "too_few_shapes",
            Error::InsufficientExamples { .. } => "insufficient_examples",
            Error::MissingLabel(_) => "missing_label",
            Error::LayoutMismatch(_) => "layout_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}
