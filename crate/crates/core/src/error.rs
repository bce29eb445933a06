use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("non-finite value recorded at tape node {index}")]
    NonFiniteValue { index: usize },
    #[error("backward requires a scalar output, got {0} values")]
    ScalarRequired(usize),
    #[error("state is at the gravitational singularity (|q| = 0)")]
    SingularRadius,
    #[error("non-finite state {context}")]
    NonFiniteState { context: String },
    #[error("fixed-point iteration did not reach {tol:e} after {iterations} iterations (last increment {last:e})")]
    FixedPointDiverged { iterations: usize, tol: f64, last: f64 },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("exponential fit failed: {0}")]
    FitFailed(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("scaled covariance factor L + lambda = {0} is not positive")]
    NegativeScaledCov(f64),
    #[error("posterior covariance lost positive definiteness after jitter")]
    CovarianceCollapse,
    #[error("time grids do not match: {0}")]
    GridMismatch(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Wraps an error with the index of the step that produced it.
    pub fn at_step(self, step: usize) -> Error {
        Error::StepFailed {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Error {
        Error::NonFiniteState {
            context: context.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
