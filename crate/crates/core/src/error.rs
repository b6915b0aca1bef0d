use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("label error: {0}")]
    Label(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {report}")]
    Diverged {
        epoch: usize,
        batch: usize,
        report: String,
    },
    #[error("checkpoint mismatch on `{field}`: checkpoint has {found}, expected {expected}")]
    Mismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
