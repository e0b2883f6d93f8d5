use thiserror::Error;

pub type Result<T> = std::result::Result<T, AfnError>;

#[derive(Debug, Error)]
pub enum AfnError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("missing value in series `{series}` feature `{feature}` and imputation is disabled")]
    MissingValue { series: String, feature: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("undefined test: {0}")]
    UndefinedTest(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("clustering error: {0}")]
    Clustering(String),
    #[error("insufficient history: need at least {required} steps, got {available}")]
    History { required: usize, available: usize },
    #[error("training diverged in {stage} at epoch {epoch}: {message}")]
    Training {
        stage: String,
        epoch: usize,
        message: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("scorer error: {0}")]
    Scorer(String),
    #[error("model bundle error: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
