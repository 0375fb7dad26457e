use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at node `{0}`")]
    NonFinite(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid task parameters: {0}")]
    TaskParams(String),
    #[error("context not reachable under the task grammar: {0}")]
    Unreachable(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid segmentation: {0}")]
    Segmentation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate regression design: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from configuration rather than execution.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::TaskParams(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
