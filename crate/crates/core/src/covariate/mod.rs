//! Stochastic model of the differenced covariates.
//!
//! The stacked differences `X_t` (order `D_1..D_n, V_1..V_n, r, S`) follow a
//! mean-reverting VAR `X_t - mu = Theta (X_{t-1} - mu) + eps_t` with a sparse
//! `Theta`, and the innovations follow a dynamic factor model
//! `eps_t = Lambda F_t + e_t`, `F_t = A F_{t-1} + eta_t`, with
//! `e_t ~ N(0, diag P)` and `eta_t ~ N(0, Q)`.

mod em;
mod kalman;
mod simulate;

pub use em::{em_step, estimate_mean_reversion, fit_em, fit_em_from, EmOptions};
pub use kalman::{kalman_filter_smoother, FactorPath};
pub use simulate::{simulate_future, simulate_historical, SimulationStart, Simulator};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DifferencedPanel, Grid, StateLayout};

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Dimension(String),
    #[error("factor count q = {q} must be between 1 and m - 1 = {}", m.saturating_sub(1))]
    DegenerateFactorModel { q: usize, m: usize },
    #[error("{0}")]
    InvalidParams(String),
    #[error("numerically singular {0}; consider a larger ridge or fewer factors")]
    Singular(String),
    #[error("EM did not converge in {iterations} iterations")]
    NotConverged { iterations: usize, trace: Vec<f64> },
    #[error("bad covariate fit JSON: {0}")]
    Json(String),
}

impl CovariateError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CovariateError::Singular(_) | CovariateError::NotConverged { .. }
        )
    }
}

type Result<T> = std::result::Result<T, CovariateError>;

/// Mean-reversion coefficients of the structured `Theta`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Kappa {
    pub d: f64,
    pub v: f64,
    pub r: f64,
    pub s: f64,
    /// Coupling from the rate `r` into every `D_i`.
    pub b: f64,
}

impl Kappa {
    pub fn to_array(&self) -> [f64; 5] {
        [self.d, self.v, self.r, self.s, self.b]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            d: a[0],
            v: a[1],
            r: a[2],
            s: a[3],
            b: a[4],
        }
    }
}

/// Dense `m x m` `Theta`: `kappa_D I_n`, `kappa_V I_n`, `kappa_r`, `kappa_S`
/// on the diagonal and `b` in the `r` column of every `D` row.
pub fn assemble_theta(kappa: &Kappa, n: usize) -> DMatrix<f64> {
    let layout = StateLayout::new(n);
    let mut theta = DMatrix::zeros(layout.m(), layout.m());
    for i in 0..n {
        theta[(layout.d(i), layout.d(i))] = kappa.d;
        theta[(layout.v(i), layout.v(i))] = kappa.v;
        theta[(layout.d(i), layout.r())] = kappa.b;
    }
    theta[(layout.r(), layout.r())] = kappa.r;
    theta[(layout.s(), layout.s())] = kappa.s;
    theta
}

/// `out = Theta dev` without forming `Theta`.
pub fn apply_theta(kappa: &Kappa, layout: StateLayout, dev: &[f64], out: &mut [f64]) {
    let r = dev[layout.r()];
    for i in 0..layout.n {
        out[layout.d(i)] = kappa.d * dev[layout.d(i)] + kappa.b * r;
        out[layout.v(i)] = kappa.v * dev[layout.v(i)];
    }
    out[layout.r()] = kappa.r * r;
    out[layout.s()] = kappa.s * dev[layout.s()];
}

/// Innovations `eps_t = (X_t - mu) - Theta (X_{t-1} - mu)` for
/// `t = 2..tau'`, as an `m x (tau' - 1)` grid. A cell is missing when
/// `X_t` or any lagged cell with a nonzero `Theta` coefficient is missing.
pub fn var_residuals(panel: &DifferencedPanel, mu: &DVector<f64>, kappa: &Kappa) -> Result<Grid> {
    let x = panel.values();
    let layout = panel.layout();
    let m = layout.m();
    if mu.len() != m {
        return Err(CovariateError::Dimension(format!(
            "mu has length {}, expected {m}",
            mu.len()
        )));
    }
    let periods = panel.n_periods();
    if periods < 2 {
        return Err(CovariateError::Dimension(format!(
            "need at least 2 differenced periods, got {periods}"
        )));
    }
    let mut out = Grid::missing(m, periods - 1);
    let lag_term = |j: usize, t: usize, coef: f64| -> f64 {
        if coef == 0.0 {
            0.0
        } else {
            coef * (x.raw(j, t) - mu[j])
        }
    };
    for t in 1..periods {
        let dr = lag_term(layout.r(), t - 1, kappa.b);
        for i in 0..layout.n {
            let d = layout.d(i);
            let v = layout.v(i);
            out.set(d, t - 1, x.raw(d, t) - mu[d] - lag_term(d, t - 1, kappa.d) - dr);
            out.set(v, t - 1, x.raw(v, t) - mu[v] - lag_term(v, t - 1, kappa.v));
        }
        let (r, s) = (layout.r(), layout.s());
        out.set(r, t - 1, x.raw(r, t) - mu[r] - lag_term(r, t - 1, kappa.r));
        out.set(s, t - 1, x.raw(s, t) - mu[s] - lag_term(s, t - 1, kappa.s));
    }
    Ok(out)
}

/// Parameters `theta_x` of the covariate model.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateParams {
    pub mu: DVector<f64>,
    pub kappa: Kappa,
    /// `m x q` loadings.
    pub lambda: DMatrix<f64>,
    /// `q x q` factor transition.
    pub a: DMatrix<f64>,
    /// Idiosyncratic variances (diagonal of the `e_t` covariance).
    pub p: DVector<f64>,
    /// `q x q` factor innovation covariance.
    pub q_cov: DMatrix<f64>,
}

impl CovariateParams {
    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn q(&self) -> usize {
        self.a.nrows()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new((self.m().saturating_sub(2)) / 2)
    }

    /// Checks shapes, `m = 2n + 2`, finiteness and `P >= 0`, `Q` PSD.
    pub fn check(&self) -> Result<()> {
        let (m, q) = (self.m(), self.q());
        if m < 4 || m % 2 != 0 {
            return Err(CovariateError::InvalidParams(format!(
                "state dimension {m} is not of the form 2n + 2"
            )));
        }
        if self.lambda.shape() != (m, q)
            || self.a.shape() != (q, q)
            || self.p.len() != m
            || self.q_cov.shape() != (q, q)
        {
            return Err(CovariateError::InvalidParams("inconsistent parameter shapes".into()));
        }
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.kappa.to_array().iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.p.iter().all(|v| v.is_finite())
            && self.q_cov.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CovariateError::InvalidParams("non-finite parameter".into()));
        }
        if self.p.iter().any(|&v| v < 0.0) {
            return Err(CovariateError::InvalidParams("negative idiosyncratic variance".into()));
        }
        if crate::linalg::psd_factor(&self.q_cov, 1e-10).is_none() {
            return Err(CovariateError::InvalidParams("Q is not positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn theta(&self) -> DMatrix<f64> {
        assemble_theta(&self.kappa, self.layout().n)
    }

    pub fn spectral_radius(&self) -> f64 {
        crate::linalg::spectral_radius(&self.a)
    }
}

/// Result of [`fit_em`].
#[derive(Debug, Clone)]
pub struct CovariateModelFit {
    pub params: CovariateParams,
    pub factor_path: FactorPath,
    /// Marginal log-likelihood before each M-step of the final EM stage.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct FitJson {
    mu: Vec<f64>,
    kappa: Kappa,
    /// Row-major `m x q`.
    #[serde(rename = "Lambda")]
    lambda: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p: Vec<f64>,
    #[serde(rename = "Q")]
    q_cov: Vec<Vec<f64>>,
    q: usize,
    loglik_trace: Vec<f64>,
    converged: bool,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CovariateError::Json(format!("expected a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

impl CovariateModelFit {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let json = FitJson {
            mu: p.mu.iter().copied().collect(),
            kappa: p.kappa,
            lambda: p.lambda.transpose().iter().copied().collect(),
            a: rows_of(&p.a),
            p: p.p.iter().copied().collect(),
            q_cov: rows_of(&p.q_cov),
            q: p.q(),
            loglik_trace: self.loglik_trace.clone(),
            converged: self.converged,
        };
        serde_json::to_string_pretty(&json).expect("covariate fit serialises")
    }

    /// Parses a fit written by [`to_json`](Self::to_json). The factor path is
    /// not stored; it is recomputed from data when needed.
    pub fn params_from_json(s: &str) -> Result<(CovariateParams, Vec<f64>, bool)> {
        let j: FitJson = serde_json::from_str(s).map_err(|e| CovariateError::Json(e.to_string()))?;
        let m = j.mu.len();
        if j.q == 0 || j.lambda.len() != m * j.q {
            return Err(CovariateError::Json("Lambda does not match m x q".into()));
        }
        let params = CovariateParams {
            mu: DVector::from_vec(j.mu),
            kappa: j.kappa,
            lambda: DMatrix::from_row_slice(m, j.q, &j.lambda),
            a: from_rows(&j.a, j.q)?,
            p: DVector::from_vec(j.p),
            q_cov: from_rows(&j.q_cov, j.q)?,
        };
        params.check()?;
        Ok((params, j.loglik_trace, j.converged))
    }
}
