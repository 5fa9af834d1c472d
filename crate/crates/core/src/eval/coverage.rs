//! Empirical coverage of naive and calibrated count intervals on repeated
//! synthetic data sets.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::scenario::{ScenarioOptions, SyntheticScenario};
use super::{EvalError, Result};
use crate::covariate::{fit_em, CovariateParams, EmOptions};
use crate::data::difference_order3;
use crate::hazard::{self, FitOptions};
use crate::rng::{SeedSchedule, Stage};
use crate::uncertainty::{aggregate_pi, Method, PredictionInterval, ReplicateConfig, ReplicateContext, ReplicateMode};

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    /// Firm counts of the scenario grid.
    pub ns: Vec<usize>,
    /// Template for every grid point (its `n` is overridden).
    pub scenario: ScenarioOptions,
    /// Seed of the scenario truth.
    pub scenario_seed: u64,
    pub reps: usize,
    /// Nominal levels `1 - alpha`.
    pub levels: Vec<f64>,
    pub horizons: Vec<usize>,
    /// Bootstrap replicates per interval.
    pub b: usize,
    /// Monte Carlo paths per forecast.
    pub paths: usize,
    pub em: EmOptions,
    pub hazard: FitOptions,
    /// Master seed of the study.
    pub seed: u64,
    /// Covariate truth replacing the default one.
    pub base: Option<CovariateParams>,
}

impl CoverageConfig {
    pub fn new(ns: Vec<usize>, reps: usize) -> Self {
        Self {
            scenario: ScenarioOptions::new(ns.first().copied().unwrap_or(400)),
            ns,
            scenario_seed: 2008,
            reps,
            levels: vec![0.90, 0.95],
            horizons: (1..=6).collect(),
            b: 200,
            paths: 200,
            em: EmOptions::default(),
            hazard: FitOptions::default(),
            seed: 1,
            base: None,
        }
    }
}

/// Outcome of one repetition.
#[derive(Debug, Clone)]
pub struct CoverageRep {
    pub n: usize,
    pub index: usize,
    /// Realised cumulative defaults at each study horizon.
    pub truth: Vec<usize>,
    pub intervals: Vec<PredictionInterval>,
    pub risk_set_size: usize,
}

impl CoverageRep {
    pub fn interval(&self, level: f64, method: Method, horizon: usize) -> Option<&PredictionInterval> {
        self.intervals
            .iter()
            .find(|pi| (pi.level - level).abs() < 1e-12 && pi.method == method && pi.horizon == horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCell {
    pub n: usize,
    pub level: f64,
    pub method: Method,
    pub horizon: usize,
    pub coverage: f64,
    /// Binomial standard error `sqrt(c (1 - c) / reps)`.
    pub se: f64,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct CoverageTable {
    pub cells: Vec<CoverageCell>,
    pub reps: Vec<CoverageRep>,
    /// `(n, rep)` pairs whose fits failed.
    pub failed: Vec<(usize, usize)>,
}

impl CoverageTable {
    pub fn cell(&self, n: usize, level: f64, method: Method, horizon: usize) -> Option<&CoverageCell> {
        self.cells
            .iter()
            .find(|c| c.n == n && (c.level - level).abs() < 1e-12 && c.method == method && c.horizon == horizon)
    }

    /// Share of `(rep, level, horizon)` triples where the calibrated interval
    /// is at least as wide as the naive one.
    pub fn calibrated_wider_share(&self) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for rep in &self.reps {
            for pi in rep.intervals.iter().filter(|p| p.method == Method::Calibrated) {
                if let Some(naive) = rep.interval(pi.level, Method::Naive, pi.horizon) {
                    total += 1;
                    if pi.upper - pi.lower >= naive.upper - naive.lower {
                        hits += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

fn run_rep(scenario: &SyntheticScenario, cfg: &CoverageConfig, index: usize) -> Result<CoverageRep> {
    let world = scenario.simulate(index as u64)?;
    let hazard_fit = hazard::fit(&world.events, &world.history, None, &cfg.hazard)?;
    let diffs = difference_order3(&world.history)?;
    let cov_fit = fit_em(&diffs, &cfg.em)?;
    let ctx = ReplicateContext {
        hazard: &hazard_fit,
        covariates: &cov_fit.params,
        panel: &world.history,
        diffs: &diffs,
        risk_set: &world.risk_set,
    };
    let config = ReplicateConfig {
        horizons: cfg.horizons.clone(),
        paths: cfg.paths,
        em: ReplicateConfig::relaxed_em(&cfg.em),
        mode: ReplicateMode::Aggregate,
    };
    let alphas: Vec<f64> = cfg.levels.iter().map(|l| 1.0 - l).collect();
    let schedule = SeedSchedule::new(cfg.seed).child(&[Stage::CoverageRep as u64, scenario.n as u64, index as u64]);
    let (intervals, _) = aggregate_pi(&ctx, &config, &alphas, cfg.b, &schedule)?;
    Ok(CoverageRep {
        n: scenario.n,
        index,
        truth: cfg.horizons.iter().map(|&h| world.future_defaults[h - 1]).collect(),
        intervals,
        risk_set_size: world.risk_set.len(),
    })
}

/// Runs the study over every `n` in the grid. Repetitions whose fits fail
/// are logged and left out of the coverage fractions.
pub fn coverage_study(cfg: &CoverageConfig) -> Result<CoverageTable> {
    for &level in &cfg.levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(EvalError::Domain(format!("coverage level {level} must lie in (0, 1)")));
        }
    }
    if cfg.reps == 0 {
        return Err(EvalError::Domain("at least one repetition is required".into()));
    }
    if let Some(&h) = cfg.horizons.iter().find(|&&h| h == 0 || h > cfg.scenario.horizon_months) {
        return Err(EvalError::Domain(format!(
            "horizon {h} outside 1..={}",
            cfg.scenario.horizon_months
        )));
    }
    let mut cells = Vec::new();
    let mut reps_out = Vec::new();
    let mut failed = Vec::new();
    for &n in &cfg.ns {
        let options = ScenarioOptions {
            n,
            ..cfg.scenario.clone()
        };
        let scenario = SyntheticScenario::new(options, cfg.scenario_seed, cfg.base.as_ref())?;
        let outcomes: Vec<std::result::Result<CoverageRep, (usize, String)>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| run_rep(&scenario, cfg, r).map_err(|e| (r, e.to_string())))
            .collect();
        let mut reps = Vec::new();
        for o in outcomes {
            match o {
                Ok(rep) => reps.push(rep),
                Err((r, msg)) => {
                    log::warn!("coverage repetition {r} (n = {n}) failed: {msg}");
                    failed.push((n, r));
                }
            }
        }
        let k = reps.len();
        for &level in &cfg.levels {
            for method in [Method::Naive, Method::Calibrated] {
                for (hi, &horizon) in cfg.horizons.iter().enumerate() {
                    let hits = reps
                        .iter()
                        .filter(|rep| {
                            rep.interval(level, method, horizon).is_some_and(|pi| {
                                let t = rep.truth[hi] as f64;
                                pi.lower <= t && t <= pi.upper
                            })
                        })
                        .count();
                    let coverage = if k == 0 { f64::NAN } else { hits as f64 / k as f64 };
                    cells.push(CoverageCell {
                        n,
                        level,
                        method,
                        horizon,
                        coverage,
                        se: (coverage * (1.0 - coverage) / k.max(1) as f64).sqrt(),
                        reps: k,
                    });
                }
            }
        }
        reps_out.extend(reps);
    }
    Ok(CoverageTable {
        cells,
        reps: reps_out,
        failed,
    })
}

/// Writes `n,level,method,horizon,coverage,se,reps`.
pub fn write_coverage_csv(path: &Path, table: &CoverageTable) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "n,level,method,horizon,coverage,se,reps")?;
    for c in &table.cells {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            c.n,
            c.level,
            c.method.as_str(),
            c.horizon,
            c.coverage,
            c.se,
            c.reps
        )?;
    }
    f.flush()
}
