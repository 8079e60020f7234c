use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("non-finite value at {path}: {detail}")]
    NonFinite { path: String, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular degree matrix: {0}")]
    SingularDegree(String),

    #[error("window length {window} exceeds series length {series}")]
    Window { window: usize, series: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("fold error: {0}")]
    Fold(String),

    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),

    #[error("feature mapping error: {0}")]
    Mapping(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at iteration {iteration}: {detail}")]
    Abort { iteration: usize, detail: String },
}

impl CoreError {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
