use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("sparsity must lie in [0, 1), got {0}")]
    InvalidSparsity(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("client {client} returned a nonzero weight at mask-1 position {position} of layer `{layer}`")]
    ProtocolViolation {
        client: usize,
        layer: String,
        position: usize,
    },

    #[error("inconsistent FLOPs counts in layer {layer}: {detail}")]
    InconsistentCounts { layer: usize, detail: String },

    #[error("invalid configuration key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("class {class} has {count} samples, at least 2 are required to split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("csv parse error at row {row}, column `{column}`: {reason}")]
    CsvParse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures of the binary model/mask format. Each malformed-input case is a
/// distinct variant so callers can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("payload truncated in {section} of layer `{layer}`")]
    Truncated {
        layer: String,
        section: &'static str,
    },

    #[error("unknown encoding tag {tag} in layer `{layer}`")]
    UnknownEncoding { layer: String, tag: u8 },

    #[error("layer name `{0}` exceeds 255 bytes")]
    NameTooLong(String),

    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),

    #[error("malformed payload: {0}")]
    Malformed(String),
}
