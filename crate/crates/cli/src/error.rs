use thiserror::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {}", .0.join(", "))]
    VerifyFailed(Vec<String>),
    #[error("run directory {0} is locked by another run (remove .lock if stale)")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] jepo_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        use jepo_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::VerifyFailed(_) => EXIT_VERIFY,
            CliError::Core(
                E::InvalidConfig(_)
                | E::RegimeMismatch { .. }
                | E::InvalidVocab { .. }
                | E::InvalidShape(_)
                | E::ShapeMismatch(_)
                | E::MissingPrompts(_),
            ) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        }
    }
}
