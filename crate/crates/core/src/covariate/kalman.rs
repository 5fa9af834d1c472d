//! Kalman filter and Rauch–Tung–Striebel smoother for the factor model with
//! missing innovation cells.
//!
//! The factor starts from `F_0 = 0`, so `F_1 ~ N(0, Q)`. Each measurement
//! update works in information form: with `M = Lambda_O' P_O^-1 Lambda_O`
//! and `u = Lambda_O' P_O^-1 eps_O` over the observed rows `O`, only `q x q`
//! systems are solved, however many rows are observed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{CovariateError, CovariateParams, Result};
use crate::data::Grid;
use crate::linalg::{spd_inverse, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Smoothed factor moments.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPath {
    /// `E[F_t | all data]` for each innovation period.
    pub smoothed_means: Vec<DVector<f64>>,
    /// `Var[F_t | all data]`.
    pub smoothed_covariances: Vec<DMatrix<f64>>,
    /// `Cov[F_{t+1}, F_t | all data]`, one fewer than the periods.
    pub lag_one_covariances: Vec<DMatrix<f64>>,
}

impl FactorPath {
    pub fn len(&self) -> usize {
        self.smoothed_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed_means.is_empty()
    }
}

/// Sufficient statistics of one period's observed rows.
pub(super) struct StepStats {
    pub info: DMatrix<f64>,
    pub score: DVector<f64>,
    pub quad: f64,
    pub logdet_p: f64,
    pub n_obs: usize,
}

pub(super) fn step_stats(innov: &Grid, lambda: &DMatrix<f64>, p: &DVector<f64>, t: usize) -> Result<StepStats> {
    let q = lambda.ncols();
    let mut info = DMatrix::zeros(q, q);
    let mut score = DVector::zeros(q);
    let mut quad = 0.0;
    let mut logdet_p = 0.0;
    let mut n_obs = 0;
    for j in 0..innov.rows() {
        let e = innov.raw(j, t);
        if e.is_nan() {
            continue;
        }
        let pj = p[j];
        if !(pj > 0.0) {
            return Err(CovariateError::Singular(format!(
                "idiosyncratic variance P[{j}] = {pj}"
            )));
        }
        let w = 1.0 / pj;
        for a in 0..q {
            let la = lambda[(j, a)];
            score[a] += la * e * w;
            for b in 0..q {
                info[(a, b)] += la * lambda[(j, b)] * w;
            }
        }
        quad += e * e * w;
        logdet_p += pj.ln();
        n_obs += 1;
    }
    Ok(StepStats {
        info,
        score,
        quad,
        logdet_p,
        n_obs,
    })
}

/// Forward filter and backward smoother over the `m x T` innovation grid.
/// Returns the smoothed factor path and the exact marginal log-likelihood
/// of the observed cells.
pub fn kalman_filter_smoother(innov: &Grid, params: &CovariateParams) -> Result<(FactorPath, f64)> {
    let q = params.q();
    let periods = innov.cols();
    if innov.rows() != params.m() {
        return Err(CovariateError::Dimension(format!(
            "innovation grid has {} rows, model has {}",
            innov.rows(),
            params.m()
        )));
    }
    let stats: Vec<StepStats> = (0..periods)
        .into_par_iter()
        .map(|t| step_stats(innov, &params.lambda, &params.p, t))
        .collect::<Result<_>>()?;

    let a = &params.a;
    let identity = DMatrix::<f64>::identity(q, q);
    let mut pred_mean = Vec::with_capacity(periods);
    let mut pred_cov = Vec::with_capacity(periods);
    let mut filt_mean: Vec<DVector<f64>> = Vec::with_capacity(periods);
    let mut filt_cov: Vec<DMatrix<f64>> = Vec::with_capacity(periods);
    let mut loglik = 0.0;
    let mut f_prev = DVector::zeros(q);
    let mut s_prev = DMatrix::zeros(q, q);
    for (t, st) in stats.iter().enumerate() {
        let fp = a * &f_prev;
        let sp = symmetrize(&(a * &s_prev * a.transpose() + &params.q_cov));
        let (ff, sf) = if st.n_obs == 0 {
            (fp.clone(), sp.clone())
        } else {
            let g = &identity + &st.info * &sp;
            let lu = g.lu();
            let det = lu.determinant();
            if !(det > 0.0 && det.is_finite()) {
                return Err(CovariateError::Singular(format!(
                    "innovation covariance at period {t}"
                )));
            }
            let g_inv = lu
                .try_inverse()
                .ok_or_else(|| CovariateError::Singular(format!("innovation covariance at period {t}")))?;
            let sf = symmetrize(&(&sp * g_inv));
            let w = &st.score - &st.info * &fp;
            let ff = &fp + &sf * &w;
            let quad = st.quad - 2.0 * fp.dot(&st.score) + fp.dot(&(&st.info * &fp)) - w.dot(&(&sf * &w));
            loglik -= 0.5 * (st.n_obs as f64 * LN_2PI + st.logdet_p + det.ln() + quad);
            (ff, sf)
        };
        f_prev = ff.clone();
        s_prev = sf.clone();
        pred_mean.push(fp);
        pred_cov.push(sp);
        filt_mean.push(ff);
        filt_cov.push(sf);
    }

    let mut smoothed_means = filt_mean.clone();
    let mut smoothed_covariances = filt_cov.clone();
    let mut lag_one_covariances = vec![DMatrix::zeros(q, q); periods.saturating_sub(1)];
    for t in (0..periods.saturating_sub(1)).rev() {
        let sp_inv = spd_inverse(&pred_cov[t + 1])
            .ok_or_else(|| CovariateError::Singular(format!("predicted factor covariance at period {}", t + 1)))?;
        let j = &filt_cov[t] * a.transpose() * sp_inv;
        let next_mean = smoothed_means[t + 1].clone();
        let next_cov = smoothed_covariances[t + 1].clone();
        smoothed_means[t] = &filt_mean[t] + &j * (next_mean - &pred_mean[t + 1]);
        smoothed_covariances[t] = symmetrize(&(&filt_cov[t] + &j * (&next_cov - &pred_cov[t + 1]) * j.transpose()));
        lag_one_covariances[t] = next_cov * j.transpose();
    }
    Ok((
        FactorPath {
            smoothed_means,
            smoothed_covariances,
            lag_one_covariances,
        },
        loglik,
    ))
}
