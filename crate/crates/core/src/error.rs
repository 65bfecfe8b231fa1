use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectories belong to different prompts ({0} vs {1})")]
    PromptMismatch(usize, usize),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("unbounded density ratio: policy {policy} puts zero mass on prompt {prompt}, response {response}")]
    UnboundedRatio {
        policy: usize,
        prompt: usize,
        response: usize,
    },

    #[error("policy class is empty")]
    EmptyClass,

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid noise configuration: {0}")]
    InvalidNoise(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("no data to plot")]
    EmptyData,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
