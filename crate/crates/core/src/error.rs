use thiserror::Error;

use crate::covariate::CovariateError;
use crate::data::DataError;
use crate::eval::EvalError;
use crate::forecast::ForecastError;
use crate::hazard::HazardError;
use crate::poisson_binomial::PoissonBinomialError;
use crate::uncertainty::UncertaintyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline-level error. Each stage keeps its own error type; this enum is what
/// front ends see.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    PoissonBinomial(#[from] PoissonBinomialError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Error {
    /// True for failures of the numerics (non-convergence, singular matrices)
    /// as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Data(_) => false,
            Error::Hazard(e) => e.is_numerical(),
            Error::Covariate(e) => e.is_numerical(),
            Error::Forecast(e) => e.is_numerical(),
            Error::PoissonBinomial(e) => e.is_numerical(),
            Error::Uncertainty(e) => e.is_numerical(),
            Error::Eval(e) => e.is_numerical(),
        }
    }
}
