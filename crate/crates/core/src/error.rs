use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration failed at t = {time}: {reason}")]
    IntegrationFailure { time: f64, reason: String },

    #[error("burst {burst}: {source}")]
    Burst {
        burst: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("burst {0} carries no velocities")]
    IncompleteBurst(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("need at least {required} samples per burst, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (integration blow-up and the like),
    /// as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::IntegrationFailure { .. } => true,
            Error::Burst { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
