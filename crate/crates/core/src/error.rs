use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("state tree has {count} states, exceeding the cap of {cap}")]
    CapExceeded { count: u128, cap: usize },
    #[error("occupancy measures require gamma < 1 (got {0})")]
    GammaOne(f64),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("measures are defined on different state spaces")]
    MeasureMismatch,
    #[error("prompt {0} admits only one terminal response")]
    DegeneratePrompt(usize),
    #[error("beta must be positive (got {0})")]
    NonPositiveBeta(f64),
    #[error("reference policy assigns zero probability to action {action} at state #{state}")]
    ZeroReferenceProbability { state: usize, action: usize },
    #[error("policy assigns zero probability to action {action} at state #{state}")]
    ZeroProbability { state: usize, action: usize },
    #[error("unknown divergence `{0}`")]
    UnknownDivergence(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("discounted KL requested implicitly with gamma = {0}; pick a convention explicitly")]
    GammaUnsupported(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("artifact already exists: {0}")]
    ArtifactExists(PathBuf),
    #[error("response does not reach a terminal state")]
    NotTerminal,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
