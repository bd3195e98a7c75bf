use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("input leaf `{0}` was not bound")]
    UnboundInput(String),
    #[error("no leaf named `{0}` in graph")]
    UnknownLeaf(String),
    #[error("backward requires a scalar root, root has shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad IDX magic number: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split leaves an empty side ({train} / {test})")]
    EmptySplit { train: usize, test: usize },
    #[error("brute-force grid has {points} points, cap is {cap}")]
    GridCapExceeded { points: f64, cap: f64 },
    #[error("retrained model stopped at train error {train_error}, above target {target}")]
    NotInterpolated { train_error: f64, target: f64 },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("every sample pair was skipped ({skipped} pairs with a zero-norm vector)")]
    AllPairsSkipped { skipped: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint model spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
