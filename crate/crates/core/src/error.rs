use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("enumeration limit exceeded: V^L = {size} exceeds cap {cap}")]
    EnumerationLimit { size: u128, cap: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate posterior: the prior assigns no mass to any sequence")]
    DegeneratePosterior,

    #[error("divergent KL: joint mass on a sequence with zero reference probability")]
    DivergentKl,

    #[error("degenerate kernel: the bridge variance is zero at level {0}, no Lebesgue density")]
    DegenerateKernel(f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("sampler step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
