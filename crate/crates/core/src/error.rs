use thiserror::Error;

pub type Result<T, E = AktError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AktError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at line {line}: {detail}")]
    DataLine { line: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("index {index} out of range for {what} (size {size})")]
    Index { what: &'static str, index: usize, size: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AktError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AktError::Shape { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        AktError::Config(detail.into())
    }
}
