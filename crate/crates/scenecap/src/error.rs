use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("model is scene-factorized but no scene vector was supplied")]
    MissingScene,
    #[error("model is not scene-factorized")]
    NotFactorized,
    #[error("invalid scene vector: {0}")]
    InvalidScene(String),
    #[error("token {token} is outside the vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("word {0:?} does not occur in the sentence")]
    WordAbsent(String),
    #[error("box {bbox:?} lies outside the {width}x{height} image")]
    BoxOutOfBounds {
        bbox: crate::regions::BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("coverage constraint unattainable: best achievable coverage {achieved:.4} < {required:.4}")]
    Coverage { achieved: f64, required: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(String),
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
