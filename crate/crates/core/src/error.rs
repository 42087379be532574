use thiserror::Error;

/// Errors produced anywhere in the filter, feature, baseline and simulator code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("matrix is not positive definite: pivot {pivot} = {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("quadrature rule moment residual {residual:e} exceeds threshold {threshold:e}")]
    RuleQuality { residual: f64, threshold: f64 },

    #[error("requested rank {requested} exceeds numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::Step { step, source: Box::new(self) }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// True when the root cause is a numerical breakdown rather than bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFailure(_)
            | Error::NotPositiveDefinite { .. }
            | Error::RuleQuality { .. }
            | Error::RankDeficient { .. } => true,
            Error::Step { source, .. } | Error::Context { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
