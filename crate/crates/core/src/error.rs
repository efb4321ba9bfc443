use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward root is not a node of this tape")]
    RootNotOnTape,

    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {components}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        components: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Failures while decoding IDX files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{file}: bad magic number 0x{found:08x} at offset {offset}, expected 0x{expected:08x}")]
    BadMagic {
        file: String,
        offset: usize,
        found: u32,
        expected: u32,
    },

    #[error("{file}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        file: String,
        expected: usize,
        found: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// Failures while reading a run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("bad override `{0}`: expected section.key=value")]
    BadOverride(String),
}
