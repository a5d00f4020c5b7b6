use std::path::PathBuf;

/// Errors produced anywhere in the gesture pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("keypoint count mismatch: expected {expected}, found {found}")]
    KeypointMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate thin-plate-spline system: {0}")]
    Singular(String),

    #[error("non-finite loss {loss} at step {step}: {diagnostic}")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        diagnostic: String,
    },

    #[error("audio too short: need at least {min_seconds:.3} s, got {got_seconds:.3} s")]
    AudioTooShort { min_seconds: f64, got_seconds: f64 },

    #[error("wav error at {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedAudio { path: PathBuf, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// File the error refers to, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Wav { path, .. }
            | Error::UnsupportedAudio { path, .. }
            | Error::Io { path, .. }
            | Error::Json { path, .. }
            | Error::Image { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDataset => "empty_dataset",
            Error::KeypointMismatch { .. } => "keypoint_mismatch",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Singular(_) => "singular",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::AudioTooShort { .. } => "audio_too_short",
            Error::Wav { .. } => "wav",
            Error::UnsupportedAudio { .. } => "unsupported_audio",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Image { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
        }
    }
}
