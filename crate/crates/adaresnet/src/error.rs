//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Bad scalar argument (stride, epoch count, class count, ...).
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Backward was asked to differentiate a non-scalar node.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A trainable parameter was registered on the tape but no gradient
    /// reached it: the graph between it and the loss is disconnected.
    #[error("parameter '{name}' is detached from the loss graph")]
    DetachedParameter { name: String },

    /// Optimizer step asked for a gradient that was never produced.
    #[error("no gradient available for parameter '{name}'")]
    MissingGradient { name: String },

    /// Binary dataset file starts with the wrong magic number.
    #[error("{path}: bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// Binary dataset file ends before its declared payload.
    #[error("{path}: truncated: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    /// Image file and label file disagree on item count.
    #[error("item count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// CIFAR binary file length is not a whole number of records.
    #[error("{path}: length {len} is not a multiple of the {record} byte record size")]
    InvalidRecordLength {
        path: String,
        len: usize,
        record: usize,
    },

    /// A label byte exceeds the class count.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Checkpoint container is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss left the finite range.
    #[error("numeric divergence at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
