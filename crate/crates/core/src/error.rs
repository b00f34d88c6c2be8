use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ebwm_autodiff::Error),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("sequence length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("batch mode does not match model mode")]
    ModeMismatch,
    #[error("non-finite {what} at refinement step {step}")]
    NonFiniteRefinement { what: &'static str, step: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid init strategy: {0}")]
    InvalidStrategy(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("corpus of {len} tokens is too short for windows of {window}")]
    CorpusTooShort { len: usize, window: usize },
    #[error("schedule step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("gradient is non-finite after clipping; step aborted")]
    StepAborted,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("data producer stopped before the run finished")]
    ProducerStopped,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config { .. } => "config",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::ModeMismatch => "mode_mismatch",
            Error::NonFiniteRefinement { .. } | Error::NonFinite(_) => "non_finite",
            Error::InvalidStrategy(_) => "invalid_strategy",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::CorpusTooShort { .. } => "corpus_too_short",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::StepAborted => "step_aborted",
            Error::MissingParam(_) => "missing_param",
            Error::Checkpoint(_) => "checkpoint",
            Error::ProducerStopped => "data",
            Error::Plot(_) => "plot",
            Error::Io { .. } => "io",
        }
    }
}
