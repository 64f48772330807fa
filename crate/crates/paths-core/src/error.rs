use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PathsError>;

#[derive(Debug, Error)]
pub enum PathsError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("hierarchy exhausted: level {level} has no successor (n = {levels})")]
    HierarchyExhausted { level: usize, levels: usize },
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("slide has no foreground patches at the coarsest level")]
    EmptySlide,
    #[error("state error: {0}")]
    State(String),
    #[error("quantisation error: {0}")]
    Quantisation(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PathsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PathsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        PathsError::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad data or files rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, PathsError::InvalidConfig(_))
    }
}
