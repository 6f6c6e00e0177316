use std::path::PathBuf;

use thiserror::Error;

/// Every failure the workbench can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("kernel {kernel}x{kernel} is larger than input {height}x{width}")]
    KernelTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },

    #[error("loss must be a scalar, node has shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model spec at layer {layer} ({name}): {reason}")]
    InvalidSpec {
        layer: usize,
        name: String,
        reason: String,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("attack failed at epsilon {epsilon}: {source}")]
    Sweep {
        epsilon: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("synthetic dataset needs at least 6 classes, got {0}")]
    TooFewClasses(usize),

    #[error("split needs {requested} items but the dataset holds {available}")]
    SplitOverflow { requested: usize, available: usize },

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint is for `{found}`, expected `{expected}`")]
    DescriptorMismatch { expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("top-{k} requested but only {classes} classes exist")]
    TopKTooLarge { k: usize, classes: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
