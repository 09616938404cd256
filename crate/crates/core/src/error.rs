use std::io;

use thiserror::Error;

/// Errors produced by the tipcache library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("bad magic: expected \"TIPEMB1\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("CRC32 mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("duplicate class name {0:?}")]
    DuplicateClassName(String),
    #[error("invalid embedding set: {0}")]
    InvalidSet(String),
    #[error("dim {dim} is smaller than the number of classes {num_classes}")]
    DimTooSmall { dim: usize, num_classes: usize },
    #[error("class {class} has {count} samples, expected {expected}")]
    UnbalancedClasses {
        class: usize,
        count: usize,
        expected: usize,
    },
    #[error("embedding set is not marked normalized")]
    NotNormalized,
    #[error("{shots} samples per class cannot be split into {target} equal groups")]
    NotDivisible { shots: usize, target: usize },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite logit at row {0}")]
    NonFiniteLogit(usize),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("step {step} out of range for {total} total steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("class {class} has {have} samples, need {need}")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl Error {
    /// Stable machine-readable name for the error variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroNormRow(_) => "ZeroNormRow",
            Error::BadMagic => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::Malformed(_) => "Malformed",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::NotUnitNorm { .. } => "NotUnitNorm",
            Error::DuplicateClassName(_) => "DuplicateClassName",
            Error::InvalidSet(_) => "InvalidSet",
            Error::DimTooSmall { .. } => "DimTooSmall",
            Error::UnbalancedClasses { .. } => "UnbalancedClasses",
            Error::NotNormalized => "NotNormalized",
            Error::NotDivisible { .. } => "NotDivisible",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::NonFiniteLogit(_) => "NonFiniteLogit",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::StepOutOfRange { .. } => "StepOutOfRange",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "IoError",
            Error::Serialize(_) => "SerializeError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
