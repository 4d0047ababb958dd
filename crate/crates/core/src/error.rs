use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelLargerThanInput { kernel: (usize, usize), input: (usize, usize) },
    #[error("stride must be positive")]
    NonPositiveStride,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("target is not one-hot")]
    NotOneHot,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unrecognized name `{0}`")]
    UnknownKind(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("window {window} larger than image {image}")]
    WindowLargerThanImage { window: usize, image: usize },
    #[error("image is not square: {0:?}")]
    NonSquareImage(Vec<usize>),
    #[error("empty sequence")]
    EmptySequence,
    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range 0..{len}")]
    LabelOutOfRange { label: usize, len: usize },
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("invalid k = {k} for {labels} labels")]
    InvalidK { k: usize, labels: usize },
    #[error("baseline must be positive")]
    ZeroBaseline,
    #[error("corrupt data at {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptManifest { path: path.into(), reason: reason.into() }
    }
}
