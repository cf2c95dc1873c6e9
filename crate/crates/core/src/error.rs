use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),

    #[error("solver hit the iteration cap ({iterations}) without meeting tolerance")]
    NonConvergence { iterations: usize },

    #[error("linear system is singular or ill-conditioned (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },

    #[error("active set is empty")]
    EmptyActiveSet,

    #[error("row {row} of the active coefficients has zero norm")]
    ZeroRow { row: usize },

    #[error("class {class} has no training pixels")]
    EmptyClass { class: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("no scored test pixels")]
    NoTestPixels,

    #[error("label {label} exceeds the palette size {palette}")]
    PaletteOverflow { label: u16, palette: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: u16, classes: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("length mismatch in {path}: expected {expected} values, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
