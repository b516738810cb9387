use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected}, got {actual}")]
    Shape {
        node: String,
        expected: String,
        actual: String,
    },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no CTC alignment of {label_len} labels ({repeats} repeats) fits in {frames} frames")]
    InfeasibleAlignment {
        label_len: usize,
        repeats: usize,
        frames: usize,
    },
    #[error("word not in lexicon: {0:?}")]
    OutOfVocabulary(String),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("keyword has {rows} phonemes but the map has only {frames} frames")]
    NoPath { rows: usize, frames: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("config key {key}: {message}")]
    Config { key: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(node: impl Into<String>, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            node: node.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
