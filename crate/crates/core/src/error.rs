use thiserror::Error;

#[derive(Debug, Error)]
pub enum IclError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IclError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> IclError {
    IclError::Dimension {
        op,
        detail: detail.into(),
    }
}
