use std::path::PathBuf;

use thiserror::Error;

use crate::alignment::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: reduction over an axis of extent 0")]
    EmptyAxis { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected a {expected} track, got {found}")]
    WrongModality { expected: Modality, found: Modality },
    #[error("{modality} track has length {length}, need at least {min}")]
    TrackTooShort {
        modality: Modality,
        length: usize,
        min: usize,
    },
    #[error("mask has no valid positions")]
    NoValidPositions,
    #[error("attention row {row} is off the simplex (sum {sum}, min {min})")]
    OffSimplex { row: usize, sum: f64, min: f64 },
    #[error("sequence length {length} is shorter than the largest head kernel ({min}); pad upstream")]
    SequenceTooShort { length: usize, min: usize },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("undefined correlation: zero rank variance")]
    UndefinedCorrelation,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("track extents {length}x{dim} overflow")]
    DimOverflow { length: u64, dim: u64 },
    #[error("unknown modality code {0}")]
    UnknownModality(u8),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("sample `{sample}`: {modality} track: {source}")]
    SampleTrack {
        sample: String,
        modality: Modality,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{what} mismatch: checkpoint has {checkpoint}, data has {data}")]
    DimMismatch {
        what: String,
        checkpoint: usize,
        data: usize,
    },
    #[error("strategy `{0}` produces no attention weights")]
    NoAttention(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
