use thiserror::Error;

use crate::policy::PromptId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary needs at least 2 ordinary tokens, got {size}")]
    InvalidVocab { size: usize },

    #[error("invalid policy shape: {0}")]
    InvalidShape(String),

    #[error("unknown prompt id {prompt} (policy has {num_prompts} prompts)")]
    UnknownPrompt { prompt: PromptId, num_prompts: usize },

    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("enumeration budget exceeded for {what}: needs {required} items, cap is {cap}")]
    BudgetExceeded {
        what: &'static str,
        required: u128,
        cap: u128,
    },

    #[error("marginal likelihood of the ground-truth answer is zero")]
    ZeroMarginal,

    #[error("{estimator} needs at least {required} samples, got {got}")]
    InsufficientSamples {
        estimator: &'static str,
        required: usize,
        got: usize,
    },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("algorithm {algorithm} cannot run on {regime} tasks")]
    RegimeMismatch {
        algorithm: String,
        regime: String,
    },

    #[error("generations are missing for prompts {0:?}")]
    MissingPrompts(Vec<PromptId>),

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
