use std::io;

use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum LdcError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not positive semidefinite (jitter schedule exhausted)")]
    NotPsd,
    #[error("cache does not match the network it is used with")]
    StaleCache,
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("class sets differ between the two sample sets")]
    ClassMismatch,
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("zero-norm feature vector")]
    ZeroVector,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("class {0} was already seen")]
    ClassCollision(usize),
    #[error("class {class} has {found} shots, expected {expected}")]
    ShotCountMismatch {
        class: usize,
        expected: usize,
        found: usize,
    },
    #[error("test label {0} belongs to an unseen class")]
    UnseenLabel(usize),
    #[error("empty accuracy list")]
    EmptyList,
    #[error("could not place class means after {0} rejection attempts")]
    PlacementFailure(usize),
    #[error("class has {available} samples, {required} required")]
    InsufficientSamples { available: usize, required: usize },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated file")]
    TruncatedFile,
    #[error("ragged csv at line {0}")]
    RaggedCsv(usize),
    #[error("unparseable csv field {field:?} at line {line}")]
    BadCsvValue { line: usize, field: String },
    #[error("degenerate spectrum: pooled variance is zero")]
    DegenerateSpectrum,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, LdcError>;
