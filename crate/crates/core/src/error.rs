use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("particles {i} and {j} overlap exactly (r = 0)")]
    Singularity { i: usize, j: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at integration step {step}")]
    NonFiniteDynamics { step: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter `{path}`")]
    NonFiniteGradient { path: String },

    #[error("non-finite latent during reverse diffusion at step {step}")]
    NonFiniteSample { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("lag {lag} does not fit a sequence of {len} frames")]
    LagTooLong { lag: usize, len: usize },

    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("label {label} references an inactive state (K = {states})")]
    InactiveState { label: usize, states: usize },

    #[error("state collapse: only {remaining} state(s) survive refinement; beta may be too large or the lag unsuitable")]
    StateCollapse { remaining: usize },

    #[error("training diverged in phase `{phase}` at epoch {epoch}")]
    Diverged { phase: &'static str, epoch: usize },

    #[error("histograms use different binnings")]
    BinningMismatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no reference data for temperature {0}")]
    MissingReference(f64),

    #[error("config error at `{key}`: {message}")]
    Schema { key: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
