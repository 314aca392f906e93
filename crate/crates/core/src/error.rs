use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("expected {expected} points, got {got}")]
    PointCount { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("characters not in charset: {0:?}")]
    OutOfCharset(Vec<char>),

    #[error("transcript of {len} characters exceeds capacity {capacity}")]
    TranscriptTooLong { len: usize, capacity: usize },

    #[error("cannot select {requested} of {available} tokens")]
    TopN { requested: usize, available: usize },

    #[error("cannot assign {rows} targets to {cols} slots")]
    Assignment { rows: usize, cols: usize },

    #[error("lexicon is empty")]
    EmptyLexicon,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
