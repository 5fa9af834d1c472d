//! Bootstrap-calibrated prediction intervals.
//!
//! Each replicate simulates a fresh covariate history from the fitted
//! covariate model, re-estimates that model on it, draws hazard coefficients
//! from their asymptotic normal law, and reruns the Monte Carlo forecast from
//! the simulated history. Aggregate replicates also draw a default count
//! from the resulting Poisson-binomial law. Intervals are order statistics of
//! the replicates at indices `round(alpha/2 B)` and `round((1 - alpha/2) B)`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::covariate::{fit_em_from, CovariateError, CovariateParams, EmOptions, SimulationStart, Simulator};
use crate::data::{CsvFloat, DifferencedPanel, FirmPanel};
use crate::forecast::{check_horizons, predict, ForecastError, ForecastInput};
use crate::hazard::{HazardFit, HazardParams};
use crate::linalg::psd_factor;
use crate::poisson_binomial::{check_alpha, naive_pi, sample_nested_counts, PoissonBinomialError};
use crate::rng::{SeedSchedule, Stage};

/// Share of failed replicates above which interval construction aborts.
pub const MAX_DROP_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("hazard covariance is not positive semidefinite")]
    CovarianceNotRepairable,
    #[error("{0}")]
    Config(String),
    #[error("{dropped} of {requested} replicates failed (limit {:.0}%)", MAX_DROP_FRACTION * 100.0)]
    TooManyFailures { dropped: usize, requested: usize },
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    PoissonBinomial(#[from] PoissonBinomialError),
}

impl UncertaintyError {
    pub fn is_numerical(&self) -> bool {
        match self {
            UncertaintyError::CovarianceNotRepairable | UncertaintyError::TooManyFailures { .. } => true,
            UncertaintyError::Config(_) => false,
            UncertaintyError::Covariate(e) => e.is_numerical(),
            UncertaintyError::Forecast(e) => e.is_numerical(),
            UncertaintyError::PoissonBinomial(e) => e.is_numerical(),
        }
    }
}

type Result<T> = std::result::Result<T, UncertaintyError>;

/// Draw from `N(beta_hat, Sigma)`; exact copy of `beta_hat` when `Sigma = 0`.
pub fn draw_hazard_params<R: Rng + ?Sized>(fit: &HazardFit, rng: &mut R) -> Result<HazardParams> {
    let factor = psd_factor(&fit.covariance, 1e-8).ok_or(UncertaintyError::CovarianceNotRepairable)?;
    let k = factor.nrows();
    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shift = factor * z;
    let flat: Vec<f64> = fit.params.flat().iter().zip(shift.iter()).map(|(b, s)| b + s).collect();
    HazardParams::from_flat(&flat).map_err(|_| UncertaintyError::CovarianceNotRepairable)
}

/// Smallest admissible replicate count for `alpha`.
pub fn min_replicates(alpha: f64) -> usize {
    (2.0 / alpha).ceil() as usize
}

/// 1-based order-statistic indices `(round(alpha/2 B), round((1-alpha/2) B))`
/// clamped to `[1, B]`.
pub fn quantile_indices(alpha: f64, b: usize) -> (usize, usize) {
    let clamp = |x: f64| (x.round() as usize).clamp(1, b.max(1));
    (clamp(alpha / 2.0 * b as f64), clamp((1.0 - alpha / 2.0) * b as f64))
}

/// Order-statistic interval of `values` (sorted internally).
pub fn order_statistic_interval(values: &[f64], alpha: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = quantile_indices(alpha, sorted.len());
    (sorted[lo - 1], sorted[hi - 1])
}

/// What the replicates record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicateMode {
    /// Per-firm probabilities plus a sampled aggregate count.
    Aggregate,
    /// Per-firm probabilities only.
    Individual,
}

#[derive(Debug, Clone)]
pub struct ReplicateConfig {
    pub horizons: Vec<usize>,
    /// Monte Carlo paths per replicate forecast.
    pub paths: usize,
    /// EM settings for the covariate re-fit.
    pub em: EmOptions,
    pub mode: ReplicateMode,
}

impl ReplicateConfig {
    /// Replicate EM settings derived from the base fit settings: tolerance
    /// relaxed tenfold, iterations capped, unconverged iterates accepted.
    pub fn relaxed_em(base: &EmOptions) -> EmOptions {
        EmOptions {
            q: base.q,
            tol: base.tol * 10.0,
            max_iter: base.max_iter.min(50),
            accept_unconverged: true,
            refine: false,
        }
    }
}

/// Base fits and data shared by all replicates.
pub struct ReplicateContext<'a> {
    pub hazard: &'a HazardFit,
    pub covariates: &'a CovariateParams,
    pub panel: &'a FirmPanel,
    pub diffs: &'a DifferencedPanel,
    /// Firm indices (panel order) whose defaults are predicted.
    pub risk_set: &'a [usize],
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTimings {
    pub history_ms: f64,
    pub em_ms: f64,
    pub forecast_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapReplicate {
    pub index: usize,
    pub theta_t_star: HazardParams,
    pub theta_x_star: CovariateParams,
    /// `rho_star[i][h]` for the forecast firms.
    pub rho_star: Vec<Vec<f64>>,
    /// Sampled cumulative counts per horizon (aggregate mode).
    pub count_star: Option<Vec<usize>>,
    pub seed: u64,
    pub attempt: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// One replicate `b`, attempt `attempt`, drawing from its own sub-schedule.
pub fn replicate_engine(
    ctx: &ReplicateContext<'_>,
    config: &ReplicateConfig,
    schedule: &SeedSchedule,
    b: usize,
    attempt: usize,
) -> Result<BootstrapReplicate> {
    let tag = if attempt == 0 { Stage::Replicate } else { Stage::Retry };
    let sub = schedule.child(&[tag as u64, b as u64, attempt as u64]);
    let total = Instant::now();

    let t0 = Instant::now();
    let simulator = Simulator::new(ctx.covariates)?;
    let mut rng = sub.stage(Stage::HistorySimulation, 0);
    let (_, sim_diffs) = simulator.historical(ctx.panel, ctx.diffs, &mut rng)?;
    let history_ms = ms(t0);

    let t0 = Instant::now();
    let fit = fit_em_from(&sim_diffs, ctx.covariates, &config.em)?;
    let em_ms = ms(t0);

    let theta_t_star = draw_hazard_params(ctx.hazard, &mut sub.stage(Stage::HazardDraw, 0))?;

    let t0 = Instant::now();
    let start = SimulationStart::from_fit(&fit, &sim_diffs);
    let forecast = predict(
        &ForecastInput {
            hazard: &theta_t_star,
            covariates: &fit.params,
            diffs: &sim_diffs,
            start: &start,
            risk_set: ctx.risk_set,
        },
        &config.horizons,
        config.paths,
        &sub.child(&[Stage::ForecastPath as u64]),
    )?;
    let forecast_ms = ms(t0);

    let rho_star = forecast.probabilities();
    let count_star = match config.mode {
        ReplicateMode::Aggregate => Some(sample_nested_counts(
            &rho_star,
            config.horizons.len(),
            &mut sub.stage(Stage::CountDraw, 0),
        )?),
        ReplicateMode::Individual => None,
    };
    Ok(BootstrapReplicate {
        index: b,
        theta_t_star,
        theta_x_star: fit.params,
        rho_star,
        count_star,
        seed: sub.master(),
        attempt,
        em_iterations: fit.iterations,
        em_converged: fit.converged,
        timings: StageTimings {
            history_ms,
            em_ms,
            forecast_ms,
            total_ms: ms(total),
        },
    })
}

/// Completed replicates sorted by index, reusable across levels.
#[derive(Debug, Clone)]
pub struct ReplicateSet {
    pub replicates: Vec<BootstrapReplicate>,
    pub dropped: Vec<usize>,
    pub requested: usize,
    pub horizons: Vec<usize>,
    pub firm_ids: Vec<String>,
}

/// Runs replicates `0..b_count` in parallel. A failing replicate is retried
/// once on a fresh stream and dropped if it fails again; more than 5%
/// dropped aborts.
pub fn run_replicates(
    ctx: &ReplicateContext<'_>,
    config: &ReplicateConfig,
    b_count: usize,
    schedule: &SeedSchedule,
) -> Result<ReplicateSet> {
    check_horizons(&config.horizons)?;
    if b_count == 0 {
        return Err(UncertaintyError::Config("replicate count B must be positive".into()));
    }
    let outcomes: Vec<std::result::Result<BootstrapReplicate, usize>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            replicate_engine(ctx, config, schedule, b, 0)
                .or_else(|e| {
                    log::warn!("replicate {b} failed ({e}); retrying");
                    replicate_engine(ctx, config, schedule, b, 1)
                })
                .map_err(|e| {
                    log::warn!("replicate {b} dropped: {e}");
                    b
                })
        })
        .collect();
    let mut replicates = Vec::with_capacity(b_count);
    let mut dropped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => replicates.push(r),
            Err(b) => dropped.push(b),
        }
    }
    if dropped.len() as f64 > MAX_DROP_FRACTION * b_count as f64 {
        return Err(UncertaintyError::TooManyFailures {
            dropped: dropped.len(),
            requested: b_count,
        });
    }
    let firm_ids = ctx
        .risk_set
        .iter()
        .map(|&i| ctx.panel.firm_ids()[i].clone())
        .filter(|id| {
            let i = ctx.panel.firm_index(id).expect("risk-set firm in panel");
            let tail = ctx.diffs.tail_levels();
            let layout = ctx.diffs.layout();
            (0..3).all(|k| tail.raw(layout.d(i), k).is_finite() && tail.raw(layout.v(i), k).is_finite())
        })
        .collect();
    Ok(ReplicateSet {
        replicates,
        dropped,
        requested: b_count,
        horizons: config.horizons.clone(),
        firm_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Calibrated,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Calibrated => "calibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Aggregate,
    Firm(String),
}

impl Target {
    pub fn label(&self) -> &str {
        match self {
            Target::Aggregate => "aggregate",
            Target::Firm(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionInterval {
    pub target: Target,
    pub horizon: usize,
    /// Nominal coverage `1 - alpha`.
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: Method,
    /// Replicates (calibrated) or paths (naive) behind the interval.
    pub draws: usize,
}

impl ReplicateSet {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    fn check(&self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        if self.len() < min_replicates(alpha) {
            return Err(UncertaintyError::Config(format!(
                "{} replicates are too few for alpha = {alpha} (need at least {})",
                self.len(),
                min_replicates(alpha)
            )));
        }
        Ok(())
    }

    /// Calibrated interval for the cumulative count at each horizon.
    pub fn aggregate_intervals(&self, alpha: f64) -> Result<Vec<PredictionInterval>> {
        self.check(alpha)?;
        (0..self.horizons.len())
            .map(|h| {
                let values: Vec<f64> = self
                    .replicates
                    .iter()
                    .map(|r| {
                        r.count_star
                            .as_ref()
                            .map(|c| c[h] as f64)
                            .ok_or_else(|| UncertaintyError::Config("replicates carry no counts".into()))
                    })
                    .collect::<Result<_>>()?;
                let (lower, upper) = order_statistic_interval(&values, alpha);
                Ok(PredictionInterval {
                    target: Target::Aggregate,
                    horizon: self.horizons[h],
                    level: 1.0 - alpha,
                    lower,
                    upper,
                    method: Method::Calibrated,
                    draws: self.len(),
                })
            })
            .collect()
    }

    /// Calibrated interval for each firm's default probability at each
    /// horizon.
    pub fn individual_intervals(&self, alpha: f64) -> Result<Vec<PredictionInterval>> {
        self.check(alpha)?;
        let mut out = Vec::new();
        for (i, id) in self.firm_ids.iter().enumerate() {
            for (h, &horizon) in self.horizons.iter().enumerate() {
                let values: Vec<f64> = self.replicates.iter().map(|r| r.rho_star[i][h]).collect();
                let (lower, upper) = order_statistic_interval(&values, alpha);
                out.push(PredictionInterval {
                    target: Target::Firm(id.clone()),
                    horizon,
                    level: 1.0 - alpha,
                    lower,
                    upper,
                    method: Method::Calibrated,
                    draws: self.len(),
                });
            }
        }
        Ok(out)
    }

    /// One JSON object per replicate (seeds, attempts, EM status, timings).
    pub fn write_audit_log(&self, path: &Path) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            b: usize,
            seed: u64,
            attempt: usize,
            em_iterations: usize,
            em_converged: bool,
            count_star: Option<&'a [usize]>,
            timings: &'a StageTimings,
        }
        #[derive(Serialize)]
        struct Dropped {
            b: usize,
            dropped: bool,
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.replicates {
            let line = Line {
                b: r.index,
                seed: r.seed,
                attempt: r.attempt,
                em_iterations: r.em_iterations,
                em_converged: r.em_converged,
                count_star: r.count_star.as_deref(),
                timings: &r.timings,
            };
            writeln!(f, "{}", serde_json::to_string(&line).expect("audit line serialises"))?;
        }
        for &b in &self.dropped {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&Dropped { b, dropped: true }).expect("audit line serialises")
            )?;
        }
        f.flush()
    }
}

/// Plug-in count intervals from point-forecast probabilities
/// `p[i][h]`.
pub fn naive_aggregate_intervals(p: &[Vec<f64>], horizons: &[usize], alpha: f64, paths: usize) -> Result<Vec<PredictionInterval>> {
    check_alpha(alpha)?;
    horizons
        .iter()
        .enumerate()
        .map(|(h, &horizon)| {
            let column: Vec<f64> = p.iter().map(|row| row[h]).collect();
            let (lower, upper) = naive_pi(&column, alpha)?;
            Ok(PredictionInterval {
                target: Target::Aggregate,
                horizon,
                level: 1.0 - alpha,
                lower: lower as f64,
                upper: upper as f64,
                method: Method::Naive,
                draws: paths,
            })
        })
        .collect()
}

/// Writes `target,horizon_months,level,method,lower,upper`.
pub fn write_intervals_csv(path: &Path, intervals: &[PredictionInterval]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "target,horizon_months,level,method,lower,upper")?;
    for pi in intervals {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            pi.target.label(),
            pi.horizon,
            pi.level,
            pi.method.as_str(),
            CsvFloat(pi.lower),
            CsvFloat(pi.upper)
        )?;
    }
    f.flush()
}

/// Naive and calibrated aggregate count intervals at each level `alpha`.
pub fn aggregate_pi(
    ctx: &ReplicateContext<'_>,
    config: &ReplicateConfig,
    alphas: &[f64],
    b_count: usize,
    schedule: &SeedSchedule,
) -> Result<(Vec<PredictionInterval>, ReplicateSet)> {
    for &a in alphas {
        check_alpha(a)?;
        if b_count < min_replicates(a) {
            return Err(UncertaintyError::Config(format!(
                "B = {b_count} is below 2/alpha for alpha = {a}"
            )));
        }
    }
    let config = ReplicateConfig {
        mode: ReplicateMode::Aggregate,
        ..config.clone()
    };
    let base = base_forecast(ctx, &config, schedule)?;
    let set = run_replicates(ctx, &config, b_count, schedule)?;
    let mut out = Vec::new();
    for &a in alphas {
        out.extend(naive_aggregate_intervals(&base, &config.horizons, a, config.paths)?);
        out.extend(set.aggregate_intervals(a)?);
    }
    Ok((out, set))
}

/// Calibrated default-probability intervals for each risk-set firm.
pub fn individual_pi(
    ctx: &ReplicateContext<'_>,
    config: &ReplicateConfig,
    alphas: &[f64],
    b_count: usize,
    schedule: &SeedSchedule,
) -> Result<(Vec<PredictionInterval>, ReplicateSet)> {
    for &a in alphas {
        check_alpha(a)?;
        if b_count < min_replicates(a) {
            return Err(UncertaintyError::Config(format!(
                "B = {b_count} is below 2/alpha for alpha = {a}"
            )));
        }
    }
    let config = ReplicateConfig {
        mode: ReplicateMode::Individual,
        ..config.clone()
    };
    let set = run_replicates(ctx, &config, b_count, schedule)?;
    let mut out = Vec::new();
    for &a in alphas {
        out.extend(set.individual_intervals(a)?);
    }
    Ok((out, set))
}

/// Point forecast at the base fits from the observed history.
pub fn base_forecast(
    ctx: &ReplicateContext<'_>,
    config: &ReplicateConfig,
    schedule: &SeedSchedule,
) -> Result<Vec<Vec<f64>>> {
    let start = SimulationStart::from_panel(ctx.covariates, ctx.diffs)?;
    let forecast = predict(
        &ForecastInput {
            hazard: &ctx.hazard.params,
            covariates: ctx.covariates,
            diffs: ctx.diffs,
            start: &start,
            risk_set: ctx.risk_set,
        },
        &config.horizons,
        config.paths,
        &schedule.child(&[Stage::ForecastPath as u64]),
    )?;
    Ok(forecast.probabilities())
}
