use std::path::PathBuf;

use daug_nn::NnError;
use thiserror::Error;

pub type Result<T, E = DaugError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DaugError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{op}: spatial size {h}x{w} must be divisible by {divisor}")]
    IndivisibleSize {
        op: &'static str,
        h: usize,
        w: usize,
        divisor: usize,
    },
    #[error("{op}: expected {expected} channels, got {got}")]
    Channels {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown domain head {head_id} (registry has {len})")]
    UnknownHead { head_id: usize, len: usize },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("domain {0:?} is already registered")]
    DuplicateDomain(String),
    #[error("registry needs at least {need} domains, has {have}")]
    TooFewDomains { need: usize, have: usize },
    #[error("domain {0:?} has no patches")]
    EmptyDomain(String),
    #[error("non-finite {term} loss ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..={num_epochs}")]
    EpochOutOfRange { epoch: usize, num_epochs: usize },
    #[error("{op}: image {h}x{w} is smaller than {size}x{size}")]
    ImageTooSmall {
        op: &'static str,
        h: usize,
        w: usize,
        size: usize,
    },
    #[error("{op}: expected a square image, got {h}x{w}")]
    NotSquare { op: &'static str, h: usize, w: usize },
    #[error("{op}: values must be binary (0 or 1)")]
    NonBinary { op: &'static str },
    #[error("{0}")]
    Precondition(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("checkpoint contains unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl DaugError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
