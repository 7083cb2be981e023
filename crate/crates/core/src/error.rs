//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the engine, from tensor shape
/// violations to corrupt checkpoint files.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the given operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// Input outside the mathematical domain of the operation (e.g. log of
    /// a non-positive value).
    DomainError { op: &'static str, detail: String },
    /// A forward operation produced NaN/Inf from finite inputs; overflow is
    /// an error, never a silent value.
    NonFinite { op: &'static str },
    /// A configuration value is out of its legal range.
    InvalidHyperparameter(String),
    /// Batch-norm train mode needs at least two elements per channel.
    DegenerateBatch { elements_per_channel: usize },
    /// `backward` was called on a value that lives on a different tape.
    DetachedTensor,
    /// A trainable parameter reached the optimizer without a gradient.
    MissingGradient { param: String },
    /// An operation that needs at least one sample received none.
    EmptyBatch(&'static str),
    /// A training loss left the finite range; the run is aborted with
    /// diagnostics rather than clipped.
    NonFiniteLoss { phase: String, step: usize, value: f64 },
    /// Classification targets are malformed for the given loss.
    InvalidTarget(String),
    /// No usable samples.
    EmptyDataset(&'static str),
    /// Dataset too small for the requested split.
    TooSmall(String),
    /// A required class directory is missing from the dataset root.
    MissingClassDir { dir: PathBuf },
    /// A single image file could not be decoded. Ingestion reports these
    /// per file and continues; this variant surfaces when a caller treats
    /// one as fatal.
    UndecodableImage { path: PathBuf, reason: String },
    /// Filesystem failure, with the offending path.
    Io { path: PathBuf, detail: String },
    /// Checkpoint archive is malformed: bad magic, unknown version,
    /// truncated payload, or dimension overflow.
    CorruptArchive(String),
    /// Prediction and label sequences differ in length.
    LengthMismatch { left: usize, right: usize },
    /// A class label outside {0, 1}.
    InvalidLabel(u64),
    /// Metrics requested on a confusion matrix with no samples.
    EmptyMatrix,
    /// The model has no fine-tune head to separate from its backbone.
    NoHead,
    /// An augmentation plan has synthetic images to produce for a class
    /// without a generator attached.
    UntrainedGenerator { class: u8 },
    /// Image sizes disagree between datasets or between a generator and
    /// the data it must match.
    SizeMismatch { expected: usize, got: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::DomainError { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::InvalidHyperparameter(msg) => write!(f, "invalid hyperparameter: {msg}"),
            Error::DegenerateBatch { elements_per_channel } => write!(
                f,
                "batch norm in train mode needs >= 2 elements per channel, got {elements_per_channel}"
            ),
            Error::DetachedTensor => write!(f, "value was not recorded on this tape"),
            Error::MissingGradient { param } => {
                write!(f, "parameter '{param}' has no gradient")
            }
            Error::EmptyBatch(what) => write!(f, "empty batch passed to {what}"),
            Error::NonFiniteLoss { phase, step, value } => {
                write!(f, "non-finite loss {value} in {phase} at step {step}")
            }
            Error::InvalidTarget(msg) => write!(f, "invalid target: {msg}"),
            Error::EmptyDataset(what) => write!(f, "empty dataset passed to {what}"),
            Error::TooSmall(msg) => write!(f, "dataset too small: {msg}"),
            Error::MissingClassDir { dir } => {
                write!(f, "missing class directory: {}", dir.display())
            }
            Error::UndecodableImage { path, reason } => {
                write!(f, "cannot decode image {}: {reason}", path.display())
            }
            Error::Io { path, detail } => write!(f, "io error on {}: {detail}", path.display()),
            Error::CorruptArchive(msg) => write!(f, "corrupt checkpoint archive: {msg}"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::InvalidLabel(l) => write!(f, "invalid class label {l} (expected 0 or 1)"),
            Error::EmptyMatrix => write!(f, "confusion matrix has no samples"),
            Error::NoHead => write!(f, "model has no fine-tune head"),
            Error::UntrainedGenerator { class } => {
                write!(f, "no trained generator attached for class {class}")
            }
            Error::SizeMismatch { expected, got } => {
                write!(f, "image size mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io { path: path.into(), detail: err.to_string() }
    }
}
