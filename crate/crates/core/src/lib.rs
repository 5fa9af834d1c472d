//! Multiperiod corporate default forecasting under a doubly-stochastic
//! competing-risks model.
//!
//! The crate is organised along the pipeline:
//!
//! * [`data`] ingests the firm/macro covariate panel and event records, and
//!   handles the order-3 seasonal differencing and its inverse.
//! * [`hazard`] fits the exponential-additive intensity model for default and
//!   other exits by maximum likelihood.
//! * [`covariate`] models the differenced covariates as a structured
//!   mean-reverting VAR whose innovations follow a dynamic factor model,
//!   estimated by EM with a missing-data Kalman smoother.
//! * [`forecast`] produces Monte Carlo default-probability point forecasts.
//! * [`poisson_binomial`] gives the exact aggregate default-count law.
//! * [`uncertainty`] builds bootstrap-calibrated prediction intervals.
//! * [`eval`] holds the synthetic scenario generator, the coverage harness,
//!   power curves and the PI-width logistic regression.

pub mod covariate;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod hazard;
pub mod linalg;
pub mod poisson_binomial;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
