//! Competing-risks intensity model.
//!
//! Each cause `k` (default, other exit) has intensity
//! `lambda_k(x) = exp(beta_k0 + beta_k1 D + beta_k2 V + beta_k3 r + beta_k4 S)`.
//! Integrals over time use a monthly piecewise-constant rule: a firm at risk
//! in months `first..=t_i` accrues `lambda_1 + lambda_2` once per month, and an
//! event contributes `log lambda_k` at its month's covariates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{EventRecord, EventType, FirmPanel, CARRY_FORWARD_CAP};
use crate::linalg::symmetrize;

/// Event causes with their own intensity (default, other exit).
pub const N_CAUSES: usize = 2;
/// Covariates per intensity: `(D, V, r, S)`.
pub const N_COVARIATES: usize = 4;
/// Coefficients per cause, including the intercept.
pub const N_COEF: usize = N_COVARIATES + 1;
pub const N_PARAMS: usize = N_CAUSES * N_COEF;

/// Intercept assigned to a cause with no observed events; `exp` of it is
/// effectively zero.
pub const BOUNDARY_INTERCEPT: f64 = -700.0;

/// Firms per block in the parallel likelihood reduction. Partial sums are
/// combined in block order, so results are bit-identical for any thread
/// count.
pub const FIRM_BLOCK: usize = 64;

const CAUSE_NAMES: [&str; N_CAUSES] = ["default", "exit"];
const COEF_NAMES: [&str; N_COEF] = ["intercept", "D", "V", "r", "S"];

#[derive(Debug, Error)]
pub enum HazardError {
    #[error("covariates must be finite, got {0:?}")]
    NonFiniteCovariate(Vec<f64>),
    #[error("coefficients must be finite")]
    NonFiniteCoefficient,
    #[error("{0}")]
    Domain(String),
    #[error("firm `{0}` has an event record but no usable covariates")]
    DataCoverage(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("no convergence after {iterations} iterations (gradient sup-norm {grad_norm:.3e})")]
    NotConverged {
        best: Box<HazardParams>,
        iterations: usize,
        grad_norm: f64,
    },
    #[error("observed information is singular along {direction}")]
    SingularInformation { direction: String },
}

impl HazardError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HazardError::NotConverged { .. } | HazardError::SingularInformation { .. }
        )
    }
}

type Result<T> = std::result::Result<T, HazardError>;

/// Name of flattened coefficient `index`, e.g. `beta_default_D`.
pub fn coefficient_name(index: usize) -> String {
    format!(
        "beta_{}_{}",
        CAUSE_NAMES[index / N_COEF],
        COEF_NAMES[index % N_COEF]
    )
}

/// Intensity coefficients, one row per cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardParams {
    beta: [[f64; N_COEF]; N_CAUSES],
}

impl HazardParams {
    pub fn new(beta: [[f64; N_COEF]; N_CAUSES]) -> Result<Self> {
        if beta.iter().flatten().any(|b| !b.is_finite()) {
            return Err(HazardError::NonFiniteCoefficient);
        }
        Ok(Self { beta })
    }

    pub fn zeros() -> Self {
        Self {
            beta: [[0.0; N_COEF]; N_CAUSES],
        }
    }

    /// Same coefficients for both causes.
    pub fn symmetric(beta: [f64; N_COEF]) -> Result<Self> {
        Self::new([beta, beta])
    }

    pub fn beta(&self) -> &[[f64; N_COEF]; N_CAUSES] {
        &self.beta
    }

    pub fn flat(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        for k in 0..N_CAUSES {
            out[k * N_COEF..(k + 1) * N_COEF].copy_from_slice(&self.beta[k]);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != N_PARAMS {
            return Err(HazardError::Domain(format!(
                "expected {N_PARAMS} coefficients, got {}",
                flat.len()
            )));
        }
        let mut beta = [[0.0; N_COEF]; N_CAUSES];
        for k in 0..N_CAUSES {
            beta[k].copy_from_slice(&flat[k * N_COEF..(k + 1) * N_COEF]);
        }
        Self::new(beta)
    }

    #[inline]
    pub fn linear_predictor(&self, cause: usize, x: &[f64; N_COVARIATES]) -> f64 {
        let b = &self.beta[cause];
        b[0] + b[1] * x[0] + b[2] * x[1] + b[3] * x[2] + b[4] * x[3]
    }

    /// `(lambda_default, lambda_exit)` at `x`, unchecked.
    #[inline]
    pub fn rates(&self, x: &[f64; N_COVARIATES]) -> [f64; N_CAUSES] {
        [
            self.linear_predictor(0, x).exp(),
            self.linear_predictor(1, x).exp(),
        ]
    }
}

/// Monthly intensity of `cause` at covariates `x = (D, V, r, S)`.
pub fn intensity(params: &HazardParams, cause: usize, x: &[f64]) -> Result<f64> {
    if cause >= N_CAUSES {
        return Err(HazardError::Domain(format!("cause index {cause} out of range")));
    }
    let x: [f64; N_COVARIATES] = x.try_into().map_err(|_| {
        HazardError::Domain(format!("expected {N_COVARIATES} covariates, got {}", x.len()))
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HazardError::NonFiniteCovariate(x.to_vec()));
    }
    Ok(params.linear_predictor(cause, &x).exp())
}

/// Piecewise-constant integral of `lambda_cause` over the months of `path`
/// (one covariate vector per month). Empty paths integrate to zero.
pub fn cumulative_intensity(
    params: &HazardParams,
    cause: usize,
    path: &[[f64; N_COVARIATES]],
) -> Result<f64> {
    path.iter()
        .map(|x| intensity(params, cause, x))
        .sum::<Result<f64>>()
}

#[derive(Debug, Clone, Copy)]
struct FirmSpan {
    start: usize,
    end: usize,
    cause: Option<usize>,
}

/// At-risk firm-months with carried-forward covariates, ready for repeated
/// likelihood evaluation.
#[derive(Debug, Clone)]
pub struct HazardData {
    rows: Vec<[f64; N_COVARIATES]>,
    firms: Vec<FirmSpan>,
    stale_months: usize,
    excluded: Vec<String>,
}

impl HazardData {
    /// Builds the at-risk design. Firm covariates are carried forward at
    /// most `cap` months; months beyond the cap are dropped from the
    /// integral and counted in [`stale_months`](Self::stale_months). A firm
    /// whose event month has no usable covariates is excluded and listed.
    pub fn build(panel: &FirmPanel, events: &[EventRecord], cap: usize) -> Result<Self> {
        let events = crate::data::validate_events(panel, events)?;
        let mut rows = Vec::new();
        let mut firms = Vec::with_capacity(events.len());
        let mut stale_months = 0;
        let mut excluded = Vec::new();
        for (i, e) in events.iter().enumerate() {
            let first = panel.windows()[i].first;
            let last = e.event_time - 1;
            let start = rows.len();
            let cause = e.event.cause();
            let mut usable = false;
            let mut event_ok = true;
            for t in first..=last {
                match panel.carried_covariates(i, t, cap) {
                    Some(x) => {
                        rows.push(x);
                        usable = true;
                    }
                    None => {
                        stale_months += 1;
                        if t == last && cause.is_some() {
                            event_ok = false;
                        }
                    }
                }
            }
            if !usable {
                return Err(HazardError::DataCoverage(e.firm_id.clone()));
            }
            if !event_ok {
                log::warn!(
                    "firm `{}` excluded from the hazard likelihood: no covariates within {cap} months of its event",
                    e.firm_id
                );
                rows.truncate(start);
                excluded.push(e.firm_id.clone());
                continue;
            }
            firms.push(FirmSpan {
                start,
                end: rows.len(),
                cause,
            });
        }
        if stale_months > 0 {
            log::warn!("{stale_months} firm-months dropped: covariates older than {cap} months");
        }
        Ok(Self {
            rows,
            firms,
            stale_months,
            excluded,
        })
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    /// Firm-months at risk.
    pub fn exposure(&self) -> usize {
        self.rows.len()
    }

    pub fn event_counts(&self) -> [usize; N_CAUSES] {
        let mut c = [0; N_CAUSES];
        for f in &self.firms {
            if let Some(k) = f.cause {
                c[k] += 1;
            }
        }
        c
    }

    pub fn stale_months(&self) -> usize {
        self.stale_months
    }

    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    fn block_terms(&self, params: &HazardParams, firms: &[FirmSpan], grad: bool) -> (f64, [f64; N_PARAMS]) {
        let mut ll = 0.0;
        let mut g = [0.0; N_PARAMS];
        for f in firms {
            for x in &self.rows[f.start..f.end] {
                let lam = params.rates(x);
                ll -= lam[0] + lam[1];
                if grad {
                    for (k, l) in lam.iter().enumerate() {
                        let o = k * N_COEF;
                        g[o] -= l;
                        for j in 0..N_COVARIATES {
                            g[o + 1 + j] -= l * x[j];
                        }
                    }
                }
            }
            if let Some(k) = f.cause {
                let x = &self.rows[f.end - 1];
                ll += params.linear_predictor(k, x);
                if grad {
                    let o = k * N_COEF;
                    g[o] += 1.0;
                    for j in 0..N_COVARIATES {
                        g[o + 1 + j] += x[j];
                    }
                }
            }
        }
        (ll, g)
    }

    fn evaluate(&self, params: &HazardParams, grad: bool) -> (f64, [f64; N_PARAMS]) {
        let partials: Vec<(f64, [f64; N_PARAMS])> = self
            .firms
            .par_chunks(FIRM_BLOCK)
            .map(|block| self.block_terms(params, block, grad))
            .collect();
        let mut ll = 0.0;
        let mut g = [0.0; N_PARAMS];
        for (l, pg) in partials {
            ll += l;
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
        }
        (ll, g)
    }

    pub fn log_likelihood(&self, params: &HazardParams) -> f64 {
        self.evaluate(params, false).0
    }

    /// Log-likelihood and its analytic gradient over the flattened
    /// coefficients.
    pub fn log_likelihood_and_gradient(&self, params: &HazardParams) -> (f64, [f64; N_PARAMS]) {
        self.evaluate(params, true)
    }
}

/// Log-likelihood of the competing-risks model for the given events and
/// panel, with the default carry-forward cap.
pub fn log_likelihood(
    params: &HazardParams,
    events: &[EventRecord],
    panel: &FirmPanel,
) -> Result<f64> {
    Ok(HazardData::build(panel, events, CARRY_FORWARD_CAP)?.log_likelihood(params))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Gradient sup-norm at which the ascent stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Carry-forward cap in months for stale covariates.
    pub carry_cap: usize,
    /// Relative step for the finite-difference Hessian.
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            carry_cap: CARRY_FORWARD_CAP,
            fd_step: 1e-5,
        }
    }
}

/// Maximum-likelihood fit with its observed-information covariance.
#[derive(Debug, Clone)]
pub struct HazardFit {
    pub params: HazardParams,
    /// Covariance of the flattened coefficients (inverse observed
    /// information); rows of boundary causes are zero.
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Causes with no events, whose intercept sits at the boundary.
    pub boundary: Vec<EventType>,
}

#[derive(Serialize, Deserialize)]
struct HazardFitJson {
    beta: Vec<Vec<f64>>,
    cov: Vec<Vec<f64>>,
    loglik: f64,
    converged: bool,
    iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    boundary: Vec<EventType>,
}

impl HazardFit {
    pub fn standard_error(&self, index: usize) -> f64 {
        self.covariance[(index, index)].max(0.0).sqrt()
    }

    /// Two-sided Wald interval for flattened coefficient `index`.
    pub fn wald_interval(&self, index: usize, level: f64) -> Result<(f64, f64)> {
        if index >= N_PARAMS {
            return Err(HazardError::Domain(format!("coefficient index {index} out of range")));
        }
        wald_interval(self.params.flat()[index], self.standard_error(index), level)
    }

    pub fn to_json(&self) -> String {
        let json = HazardFitJson {
            beta: self.params.beta().iter().map(|r| r.to_vec()).collect(),
            cov: self
                .covariance
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            loglik: self.log_likelihood,
            converged: self.converged,
            iterations: self.iterations,
            boundary: self.boundary.clone(),
        };
        serde_json::to_string_pretty(&json).expect("hazard fit serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: HazardFitJson =
            serde_json::from_str(s).map_err(|e| HazardError::Domain(format!("bad hazard fit JSON: {e}")))?;
        let flat: Vec<f64> = j.beta.iter().flatten().copied().collect();
        let params = HazardParams::from_flat(&flat)?;
        if j.cov.len() != N_PARAMS || j.cov.iter().any(|r| r.len() != N_PARAMS) {
            return Err(HazardError::Domain("covariance must be 10x10".into()));
        }
        let covariance = DMatrix::from_fn(N_PARAMS, N_PARAMS, |r, c| j.cov[r][c]);
        Ok(Self {
            params,
            covariance,
            log_likelihood: j.loglik,
            converged: j.converged,
            iterations: j.iterations,
            boundary: j.boundary,
        })
    }
}

/// `est -/+ z_{1-(1-level)/2} * se`.
pub fn wald_interval(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(HazardError::Domain(format!("level {level} must lie in (0, 1)")));
    }
    if se == 0.0 {
        return Ok((estimate, estimate));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    Ok((estimate - z * se, estimate + z * se))
}

/// Moment-matched start: intercepts at `log(events / firm-months)`, slopes
/// zero. Causes without events start (and stay) at the boundary.
pub fn initial_params(data: &HazardData) -> HazardParams {
    let counts = data.event_counts();
    let exposure = data.exposure().max(1) as f64;
    let mut beta = [[0.0; N_COEF]; N_CAUSES];
    for k in 0..N_CAUSES {
        beta[k][0] = if counts[k] == 0 {
            BOUNDARY_INTERCEPT
        } else {
            (counts[k] as f64 / exposure).ln()
        };
    }
    HazardParams { beta }
}

/// Fits the intensity model from raw events and panel.
pub fn fit(
    events: &[EventRecord],
    panel: &FirmPanel,
    init: Option<&HazardParams>,
    opts: &FitOptions,
) -> Result<HazardFit> {
    let data = HazardData::build(panel, events, opts.carry_cap)?;
    fit_data(&data, init, opts)
}

/// Quasi-Newton (BFGS) ascent with analytic gradient; the covariance is the
/// inverse of a central finite-difference Hessian of the gradient at the
/// optimum.
pub fn fit_data(data: &HazardData, init: Option<&HazardParams>, opts: &FitOptions) -> Result<HazardFit> {
    let counts = data.event_counts();
    let boundary: Vec<usize> = (0..N_CAUSES).filter(|&k| counts[k] == 0).collect();
    for &k in &boundary {
        log::warn!(
            "no {} events: intercept fixed at the boundary ({BOUNDARY_INTERCEPT})",
            CAUSE_NAMES[k]
        );
    }
    let mut start = init.cloned().unwrap_or_else(|| initial_params(data));
    for &k in &boundary {
        start.beta[k] = [0.0; N_COEF];
        start.beta[k][0] = BOUNDARY_INTERCEPT;
    }
    let free: Vec<usize> = (0..N_PARAMS)
        .filter(|i| !boundary.contains(&(i / N_COEF)))
        .collect();

    let (best, iterations, converged, grad_norm) = bfgs_ascent(data, &start, &free, opts);
    if !converged {
        return Err(HazardError::NotConverged {
            best: Box::new(best),
            iterations,
            grad_norm,
        });
    }

    let neg_hessian = finite_difference_information(data, &best, &free, opts.fd_step);
    let k = free.len();
    let info = DMatrix::from_fn(k, k, |r, c| neg_hessian[(r, c)]);
    let inv = match nalgebra::Cholesky::new(info.clone()) {
        Some(ch) => symmetrize(&ch.inverse()),
        None => {
            let eig = info.symmetric_eigen();
            let (imin, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            let vec = eig.eigenvectors.column(imin);
            let (jmax, _) = vec
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (j, &v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
            return Err(HazardError::SingularInformation {
                direction: coefficient_name(free[jmax]),
            });
        }
    };
    let mut covariance = DMatrix::zeros(N_PARAMS, N_PARAMS);
    for (a, &ia) in free.iter().enumerate() {
        for (b, &ib) in free.iter().enumerate() {
            covariance[(ia, ib)] = inv[(a, b)];
        }
    }
    Ok(HazardFit {
        log_likelihood: data.log_likelihood(&best),
        params: best,
        covariance,
        converged,
        iterations,
        boundary: boundary
            .iter()
            .map(|&k| if k == 0 { EventType::Default } else { EventType::OtherExit })
            .collect(),
    })
}

fn with_free(base: &HazardParams, free: &[usize], x: &[f64]) -> HazardParams {
    let mut flat = base.flat();
    for (i, &f) in free.iter().enumerate() {
        flat[f] = x[i];
    }
    let mut beta = [[0.0; N_COEF]; N_CAUSES];
    for k in 0..N_CAUSES {
        beta[k].copy_from_slice(&flat[k * N_COEF..(k + 1) * N_COEF]);
    }
    HazardParams { beta }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Minimises `-loglik` over the `free` coordinates. Returns the best
/// iterate, iteration count, convergence flag and final gradient norm.
fn bfgs_ascent(
    data: &HazardData,
    start: &HazardParams,
    free: &[usize],
    opts: &FitOptions,
) -> (HazardParams, usize, bool, f64) {
    let k = free.len();
    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        let p = with_free(start, free, x);
        let (ll, g) = data.log_likelihood_and_gradient(&p);
        (-ll, free.iter().map(|&f| -g[f]).collect())
    };
    let start_flat = start.flat();
    let mut x: Vec<f64> = free.iter().map(|&f| start_flat[f]).collect();
    let (mut fx, mut g) = objective(&x);
    let mut h = DMatrix::<f64>::identity(k, k);
    let mut scaled = false;
    let mut iterations = 0;
    let mut gnorm = sup_norm(&g);

    while iterations < opts.max_iter {
        if gnorm <= opts.tol {
            return (with_free(start, free, &x), iterations, true, gnorm);
        }
        iterations += 1;
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut d = -(&h * &gv);
        let mut slope = d.dot(&gv);
        if slope >= 0.0 || !slope.is_finite() {
            h = DMatrix::identity(k, k);
            scaled = false;
            d = -gv.clone();
            slope = d.dot(&gv);
        }
        let mut step = if scaled { 1.0 } else { (1.0 / gnorm).min(1.0) };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + step * b).collect();
            let (fn_, gn) = objective(&xn);
            if fn_.is_finite() {
                let armijo = fn_ <= fx + 1e-4 * step * slope;
                // Near the optimum the objective change drowns in rounding;
                // accept steps that keep the objective flat and shrink the gradient.
                let flat_progress = fn_ <= fx + 1e-12 * fx.abs().max(1.0) && sup_norm(&gn) < gnorm;
                if armijo || flat_progress {
                    accepted = Some((xn, fn_, gn, step));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn, step)) = accepted else {
            if scaled {
                h = DMatrix::identity(k, k);
                scaled = false;
                continue;
            }
            break;
        };
        let s = d * step;
        let y = nalgebra::DVector::from_column_slice(&gn) - gv;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(k, k) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&s * hy.transpose() + &hy * s.transpose()) * rho;
        }
        x = xn;
        fx = fn_;
        g = gn;
        gnorm = sup_norm(&g);
    }
    let converged = gnorm <= opts.tol;
    (with_free(start, free, &x), iterations, converged, gnorm)
}

/// Negative Hessian over the `free` coordinates by central differences of the
/// analytic gradient, symmetrised.
fn finite_difference_information(
    data: &HazardData,
    at: &HazardParams,
    free: &[usize],
    rel_step: f64,
) -> DMatrix<f64> {
    let k = free.len();
    let base = at.flat();
    let mut h = DMatrix::zeros(k, k);
    for (c, &fc) in free.iter().enumerate() {
        let step = rel_step * base[fc].abs().max(1.0);
        let mut plus = base;
        let mut minus = base;
        plus[fc] += step;
        minus[fc] -= step;
        let (_, gp) = data.log_likelihood_and_gradient(&HazardParams { beta: unflatten(&plus) });
        let (_, gm) = data.log_likelihood_and_gradient(&HazardParams { beta: unflatten(&minus) });
        for (r, &fr) in free.iter().enumerate() {
            h[(r, c)] = -(gp[fr] - gm[fr]) / (2.0 * step);
        }
    }
    symmetrize(&h)
}

fn unflatten(flat: &[f64; N_PARAMS]) -> [[f64; N_COEF]; N_CAUSES] {
    let mut beta = [[0.0; N_COEF]; N_CAUSES];
    for k in 0..N_CAUSES {
        beta[k].copy_from_slice(&flat[k * N_COEF..(k + 1) * N_COEF]);
    }
    beta
}

/// Exact negative Hessian of the log-likelihood,
/// `sum over at-risk months of lambda_k x~ x~^T` per cause block.
pub fn analytic_information(data: &HazardData, params: &HazardParams) -> DMatrix<f64> {
    let mut info = DMatrix::zeros(N_PARAMS, N_PARAMS);
    for x in &data.rows {
        let lam = params.rates(x);
        let xt = [1.0, x[0], x[1], x[2], x[3]];
        for (k, l) in lam.iter().enumerate() {
            let o = k * N_COEF;
            for a in 0..N_COEF {
                for b in 0..N_COEF {
                    info[(o + a, o + b)] += l * xt[a] * xt[b];
                }
            }
        }
    }
    info
}
