use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no real root: discriminant {discriminant} < 0")]
    NoRealRoot { discriminant: f64 },

    #[error("unsupported Wasserstein order {0} (expected 1 or 2)")]
    UnsupportedOrder(u32),

    #[error("{x} is outside the covered range [-{n}, {n})")]
    OutOfRange { x: f64, n: u32 },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("{stage}: no convergence after {iterations} iterations (last residual {last:.3e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    NoConvergence {
        stage: String,
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("regression design is rank deficient at node {node}")]
    RegressionSingular { node: usize },

    #[error("invalid constants: need kappa > K/2 (kappa = {kappa}, K = {k}) and ell > 0 (ell = {ell})")]
    InvalidConstants { kappa: f64, k: f64, ell: f64 },

    #[error("atom {atom} has zero probability")]
    ZeroProbabilityAtom { atom: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures of the numerical schemes, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::RegressionSingular { .. }
        )
    }
}
