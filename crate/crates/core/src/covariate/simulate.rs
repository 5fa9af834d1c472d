//! Simulation of differenced covariate paths from `theta_x`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::kalman::kalman_filter_smoother;
use super::{apply_theta, var_residuals, CovariateError, CovariateModelFit, CovariateParams, Result};
use crate::data::{difference_order3, DifferencedPanel, FirmPanel, Grid, DIFF_LAG};
use crate::linalg::psd_factor;

/// State at the forecast origin: the last differenced vector and the factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationStart {
    pub x_last: Vec<f64>,
    pub f_last: DVector<f64>,
}

fn last_differences(params: &CovariateParams, panel: &DifferencedPanel) -> Vec<f64> {
    let x = panel.values();
    (0..x.rows())
        .map(|j| {
            x.row(j)
                .iter()
                .rev()
                .copied()
                .find(|v| !v.is_nan())
                .unwrap_or(params.mu[j])
        })
        .collect()
}

impl SimulationStart {
    /// Origin taken from `panel`: each series' latest observed difference
    /// (its long-run mean if none) and the smoothed factor at the last
    /// period, computed by running the smoother under `params`.
    pub fn from_panel(params: &CovariateParams, panel: &DifferencedPanel) -> Result<Self> {
        let innov = var_residuals(panel, &params.mu, &params.kappa)?;
        let (path, _) = kalman_filter_smoother(&innov, params)?;
        Ok(Self {
            x_last: last_differences(params, panel),
            f_last: path
                .smoothed_means
                .last()
                .cloned()
                .unwrap_or_else(|| DVector::zeros(params.q())),
        })
    }

    /// Origin from a fit on `panel`, reusing its factor path.
    pub fn from_fit(fit: &CovariateModelFit, panel: &DifferencedPanel) -> Self {
        Self {
            x_last: last_differences(&fit.params, panel),
            f_last: fit
                .factor_path
                .smoothed_means
                .last()
                .cloned()
                .unwrap_or_else(|| DVector::zeros(fit.params.q())),
        }
    }
}

/// Draws from the covariate model with precomputed noise factors.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    params: &'a CovariateParams,
    q_factor: DMatrix<f64>,
    p_sd: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(params: &'a CovariateParams) -> Result<Self> {
        params.check()?;
        let q_factor = psd_factor(&params.q_cov, 1e-10)
            .ok_or_else(|| CovariateError::InvalidParams("Q is not positive semidefinite".into()))?;
        Ok(Self {
            params,
            q_factor,
            p_sd: params.p.iter().map(|v| v.sqrt()).collect(),
        })
    }

    pub fn params(&self) -> &CovariateParams {
        self.params
    }

    fn step_factor<R: Rng + ?Sized>(&self, f: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let q = self.params.q();
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.params.a * f + &self.q_factor * z
    }

    fn innovation<R: Rng + ?Sized>(&self, j: usize, f: &DVector<f64>, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.params.lambda.row(j) * f)[(0, 0)] + self.p_sd[j] * z
    }

    /// Future differences for `horizon` periods after the origin. Only rows
    /// with `active[j]` are simulated (the macro rows always are); other rows
    /// are `NaN`. Output is `horizon` stacked `m`-vectors.
    pub fn future<R: Rng + ?Sized>(
        &self,
        start: &SimulationStart,
        horizon: usize,
        active: Option<&[bool]>,
        rng: &mut R,
    ) -> Vec<Vec<f64>> {
        let params = self.params;
        let layout = params.layout();
        let m = params.m();
        let is_active = |j: usize| j >= 2 * layout.n || active.is_none_or(|a| a[j]);
        let mut x = start.x_last.clone();
        let mut f = start.f_last.clone();
        let mut dev = vec![0.0; m];
        let mut pulled = vec![0.0; m];
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            f = self.step_factor(&f, rng);
            for j in 0..m {
                dev[j] = x[j] - params.mu[j];
            }
            apply_theta(&params.kappa, layout, &dev, &mut pulled);
            let mut next = vec![f64::NAN; m];
            for j in 0..m {
                if is_active(j) {
                    next[j] = params.mu[j] + pulled[j] + self.innovation(j, &f, rng);
                }
            }
            x.clone_from(&next);
            out.push(next);
        }
        out
    }

    /// A synthetic history shaped like `template`: each series starts from
    /// its first observed difference, follows the model through the rest of
    /// the sample, and is rebuilt into levels from the template's first three
    /// levels. The template's missingness pattern is kept, so nothing is
    /// extrapolated outside observation windows.
    pub fn historical<R: Rng + ?Sized>(
        &self,
        template: &FirmPanel,
        template_diffs: &DifferencedPanel,
        rng: &mut R,
    ) -> Result<(FirmPanel, DifferencedPanel)> {
        let params = self.params;
        let layout = template.layout();
        if layout.m() != params.m() {
            return Err(CovariateError::Dimension(format!(
                "template has m = {}, model has m = {}",
                layout.m(),
                params.m()
            )));
        }
        let m = layout.m();
        let periods = template_diffs.n_periods();
        let starts = template_diffs.head_start();
        let observed = template_diffs.values();

        let mut latent = vec![vec![f64::NAN; periods]; m];
        for j in 0..m {
            if starts[j] < periods {
                let first = observed.raw(j, starts[j]);
                latent[j][starts[j]] = if first.is_nan() { params.mu[j] } else { first };
            }
        }
        let mut f = DVector::zeros(params.q());
        let mut dev = vec![0.0; m];
        let mut pulled = vec![0.0; m];
        for t in 1..periods {
            f = self.step_factor(&f, rng);
            for j in 0..m {
                let prev = latent[j][t - 1];
                dev[j] = if prev.is_nan() { 0.0 } else { prev - params.mu[j] };
            }
            apply_theta(&params.kappa, layout, &dev, &mut pulled);
            for j in 0..m {
                if starts[j] < t {
                    latent[j][t] = params.mu[j] + pulled[j] + self.innovation(j, &f, rng);
                }
            }
        }

        let source = template.stacked_levels();
        let tau = template.n_months();
        let mut levels = Grid::missing(m, tau);
        for j in 0..m {
            let s = starts[j];
            let fallback = source.row(j)[s.min(tau)..]
                .iter()
                .copied()
                .find(|v| !v.is_nan())
                .unwrap_or(0.0);
            let mut chain = vec![f64::NAN; tau];
            for k in 0..DIFF_LAG.min(tau.saturating_sub(s)) {
                let h = template_diffs.head_levels().raw(j, k);
                chain[s + k] = if h.is_nan() { fallback } else { h };
            }
            for t in s..periods {
                chain[t + DIFF_LAG] = chain[t] + latent[j][t];
            }
            for t in 0..tau {
                if source.is_observed(j, t) {
                    levels.set(j, t, chain[t]);
                }
            }
        }
        let panel = FirmPanel::from_stacked(
            template.firm_ids().to_vec(),
            template.time_index().to_vec(),
            &levels,
            template.windows().to_vec(),
        )?;
        let diffs = difference_order3(&panel)?;
        Ok((panel, diffs))
    }
}

/// `horizon` future difference vectors drawn from `params` from `start`.
pub fn simulate_future<R: Rng + ?Sized>(
    params: &CovariateParams,
    start: &SimulationStart,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(CovariateError::Dimension("horizon must be at least 1".into()));
    }
    if start.x_last.len() != params.m() || start.f_last.len() != params.q() {
        return Err(CovariateError::Dimension("simulation start does not match the model".into()));
    }
    Ok(Simulator::new(params)?.future(start, horizon, None, rng))
}

/// Simulated historical panel (levels and differences) shaped like
/// `template`.
pub fn simulate_historical<R: Rng + ?Sized>(
    params: &CovariateParams,
    template: &FirmPanel,
    rng: &mut R,
) -> Result<(FirmPanel, DifferencedPanel)> {
    let diffs = difference_order3(template)?;
    Simulator::new(params)?.historical(template, &diffs, rng)
}
