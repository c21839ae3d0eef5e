use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: corpus file is empty")]
    EmptyCorpus(PathBuf),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no anchor turn: sample {0} has no prior answered turn")]
    NoAnchorTurn(String),

    #[error("backend request {prompt_index} failed (retryable): {message}")]
    Transport { prompt_index: usize, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("logprobs required: backend returned a response without token logprobs")]
    MissingLogprobs,

    #[error("use nli_mask: NLI samples are aligned by class masking, not response pruning")]
    UseNliMask,

    #[error("out-of-vocabulary token {0:?}")]
    OutOfVocabulary(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("zero variance: paired differences are constant")]
    ZeroVariance,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
