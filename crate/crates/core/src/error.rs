use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("elements belong to different groups ({0} vs {1})")]
    GroupMismatch(String, String),

    #[error("{element} is not an exact grid symmetry and cannot act on a feature map")]
    UnsupportedAction { element: String },

    #[error("class index {value} out of range for {n_classes} classes")]
    ClassOutOfRange { value: usize, n_classes: usize },

    #[error("no mask found for image '{stem}'")]
    MissingMask { stem: String },

    #[error("image and mask sizes differ for '{id}': image {image:?}, mask {mask:?}")]
    SizeMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("mask '{id}' contains value {value} which is not in the class map")]
    UnknownClass { id: String, value: u8 },

    #[error("source {source_hw:?} is smaller than the {patch}x{patch} patch")]
    PatchTooLarge { source_hw: (usize, usize), patch: usize },

    #[error("non-finite loss at seed {seed}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { seed: u64, epoch: usize, batch: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },

    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint descriptor disagrees with payload: {0}")]
    LengthMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image decoding failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
