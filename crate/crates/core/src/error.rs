use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("gradient check requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },

    #[error("unsupported magic {0:?}")]
    UnsupportedMagic(String),

    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),

    #[error("malformed PPM header: {0}")]
    PpmHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("cannot parse timestamp from file name {0:?}")]
    BadImageName(String),

    #[error("no alignable samples ({dropped_no_image} without image, {dropped_gap} across gaps, {dropped_night} night)")]
    NoAlignableSamples {
        dropped_no_image: usize,
        dropped_gap: usize,
        dropped_night: usize,
    },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("empty dataset requested")]
    EmptyDataset,

    #[error("unfilled template slot {0}")]
    UnfilledSlot(String),

    #[error("token id {0} out of range for vocabulary of {1}")]
    TokenOutOfRange(u32, usize),

    #[error("all modalities disabled")]
    NoModality,

    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    #[error("truncated checkpoint while reading {0}")]
    TruncatedCheckpoint(String),

    #[error("manifest mismatch on field `{field}`: checkpoint has {found}, expected {expected}")]
    ManifestMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
