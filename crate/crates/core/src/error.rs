use thiserror::Error;

/// Errors raised by samplers, metrics, solvers and the verification checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` = {value} is outside its domain: {reason}")]
    ParameterDomain {
        name: &'static str,
        value: f64,
        reason: String,
    },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {time} is not a node of the grid")]
    GridAlignment { time: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error(
        "transport problem has {atoms} atoms, above the solver cap of {cap}; \
         subsample the measures first (see `EmpiricalMeasure::stratified_subsample`)"
    )]
    Capacity { atoms: usize, cap: usize },

    #[error("atom {atom:?} lies outside the binning box")]
    OutsideBox { atom: Vec<f64> },

    #[error("assumption {assumption} violated: {detail}")]
    Assumption {
        assumption: &'static str,
        detail: String,
    },

    #[error("non-finite state for particle {particle} at step {step}")]
    NonFinite { particle: usize, step: usize },

    #[error("{stage} iteration did not converge after {iterations} iterations (last residual {last})")]
    NonConvergence {
        stage: &'static str,
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("numerical integrity check failed: {0}")]
    Numerical(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("ill-conditioned regression: {0}")]
    IllConditioned(String),

    #[error("unknown coefficient family `{0}`")]
    UnknownFamily(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, reason: impl Into<String>) -> Self {
        Error::ParameterDomain {
            name,
            value,
            reason: reason.into(),
        }
    }

    /// True for failures that come from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonConvergence { .. }
                | Error::Numerical(_)
                | Error::IllConditioned(_)
                | Error::Calibration(_)
                | Error::InsufficientSamples(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
