//! Estimation of the covariate model.
//!
//! `(mu, kappa)` come from pooled within-series least squares on the
//! observed `(X_{t-1}, X_t)` pairs. The factor model is then fitted to the
//! VAR residuals by EM: a Kalman smoother E-step and the closed-form
//! linear-Gaussian M-step, restricted row by row to observed cells. One
//! refinement pass re-estimates `(mu, kappa)` with rows weighted by their
//! fitted innovation precision and reruns EM from the previous solution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::kalman::{kalman_filter_smoother, FactorPath};
use super::{var_residuals, CovariateError, CovariateModelFit, CovariateParams, Kappa, Result};
use crate::data::{DifferencedPanel, Grid};
use crate::linalg::{cholesky_with_ridge, spd_inverse, spectral_radius, stationary_covariance, symmetrize};

/// Floor on idiosyncratic variances.
pub const P_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Number of factors.
    pub q: usize,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    /// Return the last iterate instead of failing when `max_iter` is hit.
    pub accept_unconverged: bool,
    /// Run the weighted `(mu, kappa)` refinement pass.
    pub refine: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            q: 2,
            tol: 1e-6,
            max_iter: 500,
            accept_unconverged: false,
            refine: true,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.sxy += x * y;
    }

    fn centered(&self) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 0.0);
        }
        (
            self.sxx - self.sx * self.sx / self.n,
            self.sxy - self.sx * self.sy / self.n,
        )
    }

    fn means(&self) -> (f64, f64) {
        (self.sx / self.n, self.sy / self.n)
    }
}

fn row_mean(x: &Grid, j: usize) -> f64 {
    let (s, n) = x
        .row(j)
        .iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0.0), |(s, n), v| (s + v, n + 1.0));
    if n > 0.0 {
        s / n
    } else {
        0.0
    }
}

fn long_run_mean(intercept: f64, kappa: f64, fallback: f64) -> f64 {
    if (1.0 - kappa).abs() < 1e-8 {
        fallback
    } else {
        intercept / (1.0 - kappa)
    }
}

fn scalar_ar1(x: &Grid, j: usize) -> (f64, f64) {
    let row = x.row(j);
    let mut mo = Moments::default();
    for t in 1..row.len() {
        if !row[t].is_nan() && !row[t - 1].is_nan() {
            mo.push(row[t - 1], row[t]);
        }
    }
    if mo.n < 2.0 {
        return (0.0, row_mean(x, j));
    }
    let (cxx, cxy) = mo.centered();
    let kappa = if cxx > 0.0 { cxy / cxx } else { 0.0 };
    let (mx, my) = mo.means();
    (kappa, long_run_mean(my - kappa * mx, kappa, row_mean(x, j)))
}

/// Per-firm centred cross-products for the `D` regression
/// `y = c_i + kappa_D x1 + b x2`.
#[derive(Default, Clone, Copy)]
struct DStats {
    n: f64,
    m1: f64,
    m2: f64,
    my: f64,
    s11: f64,
    s12: f64,
    s22: f64,
    s1y: f64,
    s2y: f64,
}

fn d_stats(x: &Grid, d: usize, r: usize) -> DStats {
    let rows = (x.row(d), x.row(r));
    let pairs: Vec<(f64, f64, f64)> = (1..rows.0.len())
        .filter_map(|t| {
            let (y, x1, x2) = (rows.0[t], rows.0[t - 1], rows.1[t - 1]);
            (!y.is_nan() && !x1.is_nan() && !x2.is_nan()).then_some((x1, x2, y))
        })
        .collect();
    let mut st = DStats::default();
    if pairs.is_empty() {
        return st;
    }
    st.n = pairs.len() as f64;
    for &(a, b, y) in &pairs {
        st.m1 += a;
        st.m2 += b;
        st.my += y;
    }
    st.m1 /= st.n;
    st.m2 /= st.n;
    st.my /= st.n;
    for &(a, b, y) in &pairs {
        let (a, b, y) = (a - st.m1, b - st.m2, y - st.my);
        st.s11 += a * a;
        st.s12 += a * b;
        st.s22 += b * b;
        st.s1y += a * y;
        st.s2y += b * y;
    }
    st
}

fn v_stats(x: &Grid, v: usize) -> Moments {
    let row = x.row(v);
    let mut mo = Moments::default();
    for t in 1..row.len() {
        if !row[t].is_nan() && !row[t - 1].is_nan() {
            mo.push(row[t - 1], row[t]);
        }
    }
    mo
}

/// Least-squares `(mu, kappa)` under the structured `Theta`. Firm series
/// share `kappa_D`, `b` and `kappa_V` and have their own means (within
/// estimators); `weights` optionally weight each stacked row.
pub fn estimate_mean_reversion(panel: &DifferencedPanel, weights: Option<&[f64]>) -> (DVector<f64>, Kappa) {
    let x = panel.values();
    let layout = panel.layout();
    let n = layout.n;
    let w = |j: usize| weights.map_or(1.0, |w| w[j]);

    let (kappa_r, mu_r) = scalar_ar1(x, layout.r());
    let (kappa_s, mu_s) = scalar_ar1(x, layout.s());

    let d: Vec<DStats> = (0..n)
        .into_par_iter()
        .map(|i| d_stats(x, layout.d(i), layout.r()))
        .collect();
    let v: Vec<Moments> = (0..n).into_par_iter().map(|i| v_stats(x, layout.v(i))).collect();

    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, st) in d.iter().enumerate() {
        let wi = w(layout.d(i));
        s11 += wi * st.s11;
        s12 += wi * st.s12;
        s22 += wi * st.s22;
        s1y += wi * st.s1y;
        s2y += wi * st.s2y;
    }
    let det = s11 * s22 - s12 * s12;
    let (kappa_d, b) = if s11 > 0.0 && s22 > 0.0 && det > 1e-10 * s11 * s22 {
        ((s22 * s1y - s12 * s2y) / det, (s11 * s2y - s12 * s1y) / det)
    } else if s11 > 0.0 {
        (s1y / s11, 0.0)
    } else {
        (0.0, 0.0)
    };

    let (mut vxx, mut vxy) = (0.0, 0.0);
    for (i, mo) in v.iter().enumerate() {
        let (cxx, cxy) = mo.centered();
        let wi = w(layout.v(i));
        vxx += wi * cxx;
        vxy += wi * cxy;
    }
    let kappa_v = if vxx > 0.0 { vxy / vxx } else { 0.0 };

    let mut mu = DVector::zeros(layout.m());
    mu[layout.r()] = mu_r;
    mu[layout.s()] = mu_s;
    for i in 0..n {
        let (dj, vj) = (layout.d(i), layout.v(i));
        let st = &d[i];
        mu[dj] = if st.n > 0.0 {
            let c = st.my - kappa_d * st.m1 - b * st.m2;
            long_run_mean(c + b * mu_r, kappa_d, row_mean(x, dj))
        } else {
            row_mean(x, dj)
        };
        let mo = &v[i];
        mu[vj] = if mo.n > 0.0 {
            let (mx, my) = mo.means();
            long_run_mean(my - kappa_v * mx, kappa_v, row_mean(x, vj))
        } else {
            row_mean(x, vj)
        };
    }
    (
        mu,
        Kappa {
            d: kappa_d,
            v: kappa_v,
            r: kappa_r,
            s: kappa_s,
            b,
        },
    )
}

/// Principal-component start for `(Lambda, A, P, Q)` from the innovation
/// grid, treating missing cells as zero for the component extraction.
fn pca_init(innov: &Grid, q: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, periods) = (innov.rows(), innov.cols());
    if periods < q + 2 {
        return Err(CovariateError::Dimension(format!(
            "{periods} innovation periods are too few for {q} factors"
        )));
    }
    let z = DMatrix::from_fn(m, periods, |j, t| {
        let v = innov.raw(j, t);
        if v.is_nan() {
            0.0
        } else {
            v
        }
    });
    let gram = z.transpose() * &z;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..periods).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = (periods as f64).sqrt();
    let factors = DMatrix::from_fn(periods, q, |t, k| eig.eigenvectors[(t, order[k])] * scale);

    let rows: Vec<(Vec<f64>, f64)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut ff = DMatrix::<f64>::zeros(q, q);
            let mut ef = DVector::<f64>::zeros(q);
            let mut ee = 0.0;
            let mut nobs = 0.0;
            for t in 0..periods {
                let e = innov.raw(j, t);
                if e.is_nan() {
                    continue;
                }
                let f = factors.row(t).transpose();
                ff += &f * f.transpose();
                ef += &f * e;
                ee += e * e;
                nobs += 1.0;
            }
            if nobs == 0.0 {
                return (vec![0.0; q], 1.0);
            }
            let l = if nobs > q as f64 {
                nalgebra::Cholesky::new(ff.clone()).map(|c| c.solve(&ef))
            } else {
                None
            }
            .unwrap_or_else(|| DVector::zeros(q));
            let resid = (ee - 2.0 * l.dot(&ef) + l.dot(&(&ff * &l))) / nobs;
            let floor = (1e-2 * ee / nobs).max(P_FLOOR);
            (l.iter().copied().collect(), resid.max(floor))
        })
        .collect();
    let lambda = DMatrix::from_fn(m, q, |j, k| rows[j].0[k]);
    let p = DVector::from_iterator(m, rows.iter().map(|r| r.1));

    let mut s10 = DMatrix::<f64>::zeros(q, q);
    let mut s00 = DMatrix::<f64>::zeros(q, q);
    for t in 1..periods {
        let cur = factors.row(t).transpose();
        let prev = factors.row(t - 1).transpose();
        s10 += &cur * prev.transpose();
        s00 += &prev * prev.transpose();
    }
    let mut a = match spd_inverse(&s00) {
        Some(inv) => &s10 * inv,
        None => DMatrix::zeros(q, q),
    };
    let rho = spectral_radius(&a);
    if rho > 0.95 {
        a *= 0.95 / rho;
    }
    let mut q_cov = DMatrix::<f64>::zeros(q, q);
    for t in 1..periods {
        let r = factors.row(t).transpose() - &a * factors.row(t - 1).transpose();
        q_cov += &r * r.transpose();
    }
    q_cov /= (periods - 1) as f64;
    q_cov = symmetrize(&q_cov) + DMatrix::identity(q, q) * 1e-6;
    Ok((lambda, a, p, q_cov))
}

fn second_moment(path: &FactorPath, t: usize) -> DMatrix<f64> {
    let f = &path.smoothed_means[t];
    &path.smoothed_covariances[t] + f * f.transpose()
}

/// Closed-form M-step from smoothed moments.
fn m_step(innov: &Grid, params: &CovariateParams, path: &FactorPath) -> CovariateParams {
    let (m, periods, q) = (innov.rows(), innov.cols(), params.q());
    let moments: Vec<DMatrix<f64>> = (0..periods).map(|t| second_moment(path, t)).collect();

    let rows: Vec<(Vec<f64>, f64)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut ff = DMatrix::<f64>::zeros(q, q);
            let mut ef = DVector::<f64>::zeros(q);
            let mut ee = 0.0;
            let mut nobs = 0.0;
            for t in 0..periods {
                let e = innov.raw(j, t);
                if e.is_nan() {
                    continue;
                }
                ff += &moments[t];
                ef += &path.smoothed_means[t] * e;
                ee += e * e;
                nobs += 1.0;
            }
            let keep = (params.lambda.row(j).iter().copied().collect(), params.p[j]);
            if nobs == 0.0 {
                return keep;
            }
            let Some(chol) = nalgebra::Cholesky::new(ff.clone()) else {
                return keep;
            };
            let l = chol.solve(&ef);
            let p = (ee - 2.0 * l.dot(&ef) + l.dot(&(&ff * &l))) / nobs;
            (l.iter().copied().collect(), p.max(P_FLOOR))
        })
        .collect();
    let lambda = DMatrix::from_fn(m, q, |j, k| rows[j].0[k]);
    let p = DVector::from_iterator(m, rows.iter().map(|r| r.1));

    let mut s11 = DMatrix::<f64>::zeros(q, q);
    let mut s10 = DMatrix::<f64>::zeros(q, q);
    let mut s00 = DMatrix::<f64>::zeros(q, q);
    for t in 0..periods {
        s11 += &moments[t];
        if t > 0 {
            s10 += &path.lag_one_covariances[t - 1]
                + &path.smoothed_means[t] * path.smoothed_means[t - 1].transpose();
            s00 += &moments[t - 1];
        }
    }
    let (a, q_cov) = match nalgebra::Cholesky::new(symmetrize(&s00)) {
        Some(c) if periods > 1 => {
            let a = c.solve(&s10.transpose()).transpose();
            let q_cov = symmetrize(&((&s11 - &a * s10.transpose()) / periods as f64));
            (a, q_cov)
        }
        _ => (params.a.clone(), params.q_cov.clone()),
    };
    let q_cov = if cholesky_with_ridge(&q_cov).is_some() {
        q_cov
    } else {
        params.q_cov.clone()
    };
    CovariateParams {
        mu: params.mu.clone(),
        kappa: params.kappa,
        lambda,
        a,
        p,
        q_cov,
    }
}

/// One EM iteration on the innovation grid: returns the updated parameters
/// and the log-likelihood at the input parameters.
pub fn em_step(innov: &Grid, params: &CovariateParams) -> Result<(CovariateParams, f64)> {
    let (path, ll) = kalman_filter_smoother(innov, params)?;
    Ok((m_step(innov, params, &path), ll))
}

struct EmRun {
    params: CovariateParams,
    path: FactorPath,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn run_em(innov: &Grid, mut params: CovariateParams, opts: &EmOptions) -> Result<EmRun> {
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (path, ll) = kalman_filter_smoother(innov, &params)?;
        if !ll.is_finite() {
            return Err(CovariateError::Singular("log-likelihood evaluation".into()));
        }
        trace.push(ll);
        let n = trace.len();
        if n >= 2 && (ll - trace[n - 2]).abs() <= opts.tol * trace[n - 2].abs().max(1.0) {
            return Ok(EmRun {
                params,
                path,
                trace,
                converged: true,
                iterations,
            });
        }
        if iterations >= opts.max_iter {
            if opts.accept_unconverged {
                return Ok(EmRun {
                    params,
                    path,
                    trace,
                    converged: false,
                    iterations,
                });
            }
            return Err(CovariateError::NotConverged { iterations, trace });
        }
        params = m_step(innov, &params, &path);
        iterations += 1;
    }
}

/// Precision weights `1 / (Lambda_j Q_inf Lambda_j' + P_j)` of each row's
/// innovation, with `Q_inf` the stationary factor covariance.
fn row_weights(params: &CovariateParams) -> Vec<f64> {
    let q_inf = if spectral_radius(&params.a) < 1.0 {
        stationary_covariance(&params.a, &params.q_cov).unwrap_or_else(|| params.q_cov.clone())
    } else {
        params.q_cov.clone()
    };
    (0..params.m())
        .map(|j| {
            let l = params.lambda.row(j);
            let var = (l * &q_inf * l.transpose())[(0, 0)] + params.p[j];
            if var > 0.0 {
                1.0 / var
            } else {
                1.0
            }
        })
        .collect()
}

/// Rotates the factors so that `Lambda' Lambda` is diagonal and decreasing,
/// with the largest loading of each column positive. The likelihood is
/// unchanged.
fn normalize_rotation(params: CovariateParams, path: FactorPath) -> (CovariateParams, FactorPath) {
    let q = params.q();
    let eig = symmetrize(&(params.lambda.transpose() * &params.lambda)).symmetric_eigen();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut u = DMatrix::from_fn(q, q, |r, c| eig.eigenvectors[(r, order[c])]);
    let rotated = &params.lambda * &u;
    for c in 0..q {
        let col = rotated.column(c);
        let pivot = col.iter().fold(0.0_f64, |acc, &v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            u.column_mut(c).neg_mut();
        }
    }
    let ut = u.transpose();
    let path = FactorPath {
        smoothed_means: path.smoothed_means.iter().map(|f| &ut * f).collect(),
        smoothed_covariances: path
            .smoothed_covariances
            .iter()
            .map(|s| symmetrize(&(&ut * s * &u)))
            .collect(),
        lag_one_covariances: path.lag_one_covariances.iter().map(|s| &ut * s * &u).collect(),
    };
    let params = CovariateParams {
        lambda: &params.lambda * &u,
        a: &ut * &params.a * &u,
        q_cov: symmetrize(&(&ut * &params.q_cov * &u)),
        ..params
    };
    (params, path)
}

fn finish(run: EmRun) -> CovariateModelFit {
    let (params, factor_path) = normalize_rotation(run.params, run.path);
    let rho = params.spectral_radius();
    if rho >= 1.0 {
        log::warn!("fitted factor transition is not stationary (spectral radius {rho:.4})");
    }
    CovariateModelFit {
        params,
        factor_path,
        loglik_trace: run.trace,
        converged: run.converged,
        iterations: run.iterations,
    }
}

fn check_q(q: usize, m: usize) -> Result<()> {
    if q == 0 || q >= m {
        return Err(CovariateError::DegenerateFactorModel { q, m });
    }
    Ok(())
}

/// Fits `theta_x` to a differenced panel.
pub fn fit_em(panel: &DifferencedPanel, opts: &EmOptions) -> Result<CovariateModelFit> {
    let m = panel.layout().m();
    check_q(opts.q, m)?;
    let (mu, kappa) = estimate_mean_reversion(panel, None);
    let innov = var_residuals(panel, &mu, &kappa)?;
    let (lambda, a, p, q_cov) = pca_init(&innov, opts.q)?;
    let start = CovariateParams {
        mu,
        kappa,
        lambda,
        a,
        p,
        q_cov,
    };
    let mut run = run_em(&innov, start, opts)?;
    if opts.refine {
        let weights = row_weights(&run.params);
        let (mu, kappa) = estimate_mean_reversion(panel, Some(&weights));
        let innov = var_residuals(panel, &mu, &kappa)?;
        run = run_em(&innov, CovariateParams { mu, kappa, ..run.params }, opts)?;
    }
    Ok(finish(run))
}

/// Refits `theta_x` starting from `start`: one weighted `(mu, kappa)` pass
/// followed by EM warm-started at `start`'s factor parameters.
pub fn fit_em_from(panel: &DifferencedPanel, start: &CovariateParams, opts: &EmOptions) -> Result<CovariateModelFit> {
    let m = panel.layout().m();
    if start.m() != m {
        return Err(CovariateError::Dimension(format!(
            "start parameters have m = {}, panel has m = {m}",
            start.m()
        )));
    }
    check_q(start.q(), m)?;
    let weights = row_weights(start);
    let (mu, kappa) = estimate_mean_reversion(panel, Some(&weights));
    let innov = var_residuals(panel, &mu, &kappa)?;
    let run = run_em(
        &innov,
        CovariateParams {
            mu,
            kappa,
            ..start.clone()
        },
        opts,
    )?;
    Ok(finish(run))
}
