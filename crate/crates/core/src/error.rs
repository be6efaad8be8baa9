use std::path::PathBuf;

use unimelgan_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no measurable loudness: every 400 ms block is below the absolute gate")]
    NoMeasurableLoudness,
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input of {len} samples is too short; the minimum is {minimum}")]
    TooShort { len: usize, minimum: usize },
    #[error("division by zero: {0}")]
    DivisionByZero(String),
    #[error("sample rate mismatch: {reference} Hz vs {generated} Hz")]
    SampleRateMismatch { reference: u32, generated: u32 },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing array `{0}`")]
    MissingArray(String),
    #[error("non-finite loss at step {step} on batch [{}]", items.join(", "))]
    NonFiniteLoss { step: u64, items: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
