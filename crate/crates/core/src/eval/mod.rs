//! Synthetic studies and evaluation metrics: the simulation design used to
//! check interval coverage, power curves with AUC, and a logistic regression
//! of realised defaults on point predictions and interval widths.

mod coverage;
mod logistic;
mod roc;
mod scenario;

pub use coverage::{coverage_study, write_coverage_csv, CoverageCell, CoverageConfig, CoverageRep, CoverageTable};
pub use logistic::{fit_logistic, logistic_interaction, write_logistic_csv, LogisticFit, LogisticTerm};
pub use roc::{auc_by_concordance, power_curve, write_roc_csv, RocCurve};
pub use scenario::{
    default_covariate_truth, generate_scenario, simulate_events, ScenarioOptions, SimulatedWorld, SyntheticScenario,
    DESIGN_BETA,
};

use thiserror::Error;

use crate::covariate::CovariateError;
use crate::data::DataError;
use crate::hazard::HazardError;
use crate::uncertainty::UncertaintyError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Domain(String),
    #[error("AUC is undefined: outcomes contain {positives} defaults and {negatives} non-defaults")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

impl EvalError {
    pub fn is_numerical(&self) -> bool {
        match self {
            EvalError::Domain(_) | EvalError::UndefinedAuc { .. } | EvalError::Data(_) => false,
            EvalError::RankDeficient => true,
            EvalError::Hazard(e) => e.is_numerical(),
            EvalError::Covariate(e) => e.is_numerical(),
            EvalError::Uncertainty(e) => e.is_numerical(),
        }
    }
}

type Result<T> = std::result::Result<T, EvalError>;
