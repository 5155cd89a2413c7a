use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("step index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    #[error("condition error: {0}")]
    Condition(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite value at step {step}{}", .iteration.map(|k| format!(", iteration {k}")).unwrap_or_default())]
    Numeric { step: usize, iteration: Option<usize> },

    #[error("denoiser does not expose an input gradient")]
    Capability,

    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
