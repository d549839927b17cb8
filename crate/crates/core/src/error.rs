use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty initialization")]
    EmptyInitialization,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("zero-size image")]
    ZeroSizeImage,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask id exceeds classifier channels (id {id}, channels {channels})")]
    MaskIdOutOfRange { id: u32, channels: usize },
    #[error("k-nearest-neighbor query needs more points than available (k = {k}, points = {points})")]
    NotEnoughPoints { k: usize, points: usize },
    #[error("replay does not match the scene: {0}")]
    ReplayMismatch(String),
    #[error("non-finite gradient for {group} of gaussian {index}")]
    NonFiniteGradient { group: &'static str, index: usize },
    #[error("group id not present: {0}")]
    GroupNotPresent(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("not a grouped scene: {0}")]
    NotGroupedScene(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed { path: path.into(), reason: reason.into() }
    }
}
