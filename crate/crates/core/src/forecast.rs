//! Multiperiod default probabilities by Monte Carlo over covariate paths.
//!
//! Along one simulated path `x*`, the probability that firm `i` defaults
//! within `s` months of the origin `tau` is
//! `rho*(s) = sum_{t=tau+1}^{tau+s} lambda_1(x*_t) exp(-sum_{u=tau+1}^{t} (lambda_1 + lambda_2)(x*_u))`,
//! the monthly version of the cause-specific subdistribution. The point
//! forecast averages `rho*` over `M` independent paths.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::covariate::{CovariateError, CovariateParams, SimulationStart, Simulator};
use crate::data::{extend_levels, CsvFloat, DifferencedPanel, EventRecord, EventType, FirmPanel};
use crate::hazard::{HazardParams, N_CAUSES, N_COVARIATES};
use crate::rng::{SeedSchedule, Stage};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("covariate path covers {got} months but horizon {needed} was requested")]
    PathTooShort { needed: usize, got: usize },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

impl ForecastError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ForecastError::Covariate(e) => e.is_numerical(),
            _ => false,
        }
    }
}

type Result<T> = std::result::Result<T, ForecastError>;

/// Checks a horizon list: non-empty, positive, strictly increasing.
pub fn check_horizons(horizons: &[usize]) -> Result<()> {
    if horizons.is_empty() {
        return Err(ForecastError::Config("at least one horizon is required".into()));
    }
    if horizons[0] == 0 || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ForecastError::Config(
            "horizons must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Cause-specific cumulative incidence along `path` (months after the
/// origin) at each horizon.
pub fn path_cause_probability(
    hazard: &HazardParams,
    cause: usize,
    path: &[[f64; N_COVARIATES]],
    horizons: &[usize],
) -> Result<Vec<f64>> {
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    if path.len() < max_h {
        return Err(ForecastError::PathTooShort {
            needed: max_h,
            got: path.len(),
        });
    }
    let mut cumulative = Vec::with_capacity(max_h);
    let mut total = 0.0;
    let mut acc = 0.0;
    for x in &path[..max_h] {
        let rates = hazard.rates(x);
        total += rates.iter().sum::<f64>();
        acc += rates[cause] * (-total).exp();
        cumulative.push(acc.min(1.0));
    }
    Ok(horizons.iter().map(|&h| cumulative[h - 1]).collect())
}

/// `rho*(s)` for the default cause along one path.
pub fn path_default_probability(
    hazard: &HazardParams,
    path: &[[f64; N_COVARIATES]],
    horizons: &[usize],
) -> Result<Vec<f64>> {
    path_cause_probability(hazard, 0, path, horizons)
}

/// Firms event-free and observed at the origin: those censored at the last
/// panel month.
pub fn risk_set(panel: &FirmPanel, events: &[EventRecord]) -> Vec<usize> {
    let tau = panel.n_months();
    events
        .iter()
        .filter(|e| e.event == EventType::Censored && e.event_time == tau)
        .filter_map(|e| panel.firm_index(&e.firm_id))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefaultProbabilityForecast {
    pub firm_id: String,
    pub horizons: Vec<usize>,
    pub rho_hat: Vec<f64>,
    /// `path_samples[m][h]`, one row per path.
    pub path_samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateForecast {
    pub risk_set: Vec<String>,
    pub horizons: Vec<usize>,
    /// `N_s`: sum of the firms' `rho_hat` at each horizon.
    pub expected_counts: Vec<f64>,
    pub firms: Vec<DefaultProbabilityForecast>,
    /// Risk-set firms without the trailing levels needed for inversion.
    pub excluded: Vec<String>,
    pub paths: usize,
    pub seed: u64,
}

impl AggregateForecast {
    /// `rho_hat[i][h]` for the forecast firms, in order.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.firms.iter().map(|f| f.rho_hat.clone()).collect()
    }

    /// Probabilities of every firm at horizon index `h`.
    pub fn at_horizon(&self, h: usize) -> Vec<f64> {
        self.firms.iter().map(|f| f.rho_hat[h]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "firm_id,horizon_months,rho_hat")?;
        for firm in &self.firms {
            for (h, r) in firm.horizons.iter().zip(&firm.rho_hat) {
                writeln!(f, "{},{h},{}", firm.firm_id, CsvFloat(*r))?;
            }
        }
        f.flush()
    }

    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            #[serde(rename = "M")]
            m: usize,
            seed: u64,
            horizons: &'a [usize],
            risk_set_size: usize,
            expected_counts: &'a [f64],
            excluded: &'a [String],
        }
        serde_json::to_string_pretty(&Sidecar {
            m: self.paths,
            seed: self.seed,
            horizons: &self.horizons,
            risk_set_size: self.risk_set.len(),
            expected_counts: &self.expected_counts,
            excluded: &self.excluded,
        })
        .expect("sidecar serialises")
    }
}

/// Inputs to a Monte Carlo forecast from one origin.
pub struct ForecastInput<'a> {
    pub hazard: &'a HazardParams,
    pub covariates: &'a CovariateParams,
    pub diffs: &'a DifferencedPanel,
    pub start: &'a SimulationStart,
    /// Firm indices (panel order) to forecast.
    pub risk_set: &'a [usize],
}

/// Runs `paths` Monte Carlo paths. Path `k` draws from stream
/// `(ForecastPath, k)` of `schedule`, so results do not depend on the
/// thread count.
pub fn predict(
    input: &ForecastInput<'_>,
    horizons: &[usize],
    paths: usize,
    schedule: &SeedSchedule,
) -> Result<AggregateForecast> {
    check_horizons(horizons)?;
    if paths == 0 {
        return Err(ForecastError::Config("path count M must be at least 1".into()));
    }
    let diffs = input.diffs;
    let layout = diffs.layout();
    let tail = diffs.tail_levels();
    let tail_of = |j: usize| [tail.raw(j, 0), tail.raw(j, 1), tail.raw(j, 2)];
    let complete = |j: usize| tail_of(j).iter().all(|v| v.is_finite());

    let mut firms = Vec::new();
    let mut excluded = Vec::new();
    for &i in input.risk_set {
        if complete(layout.d(i)) && complete(layout.v(i)) {
            firms.push(i);
        } else {
            let id = diffs.firm_ids()[i].clone();
            log::warn!("firm `{id}` has no trailing levels to invert from; excluded from the forecast");
            excluded.push(id);
        }
    }
    for j in [layout.r(), layout.s()] {
        if !complete(j) {
            return Err(ForecastError::Config(format!(
                "macro series {} lacks trailing levels",
                diffs.series_name(j)
            )));
        }
    }

    let simulator = Simulator::new(input.covariates)?;
    let mut active = vec![false; layout.m()];
    for &i in &firms {
        active[layout.d(i)] = true;
        active[layout.v(i)] = true;
    }
    let max_h = *horizons.last().expect("checked non-empty");
    let hazard = input.hazard;

    let per_path: Vec<Vec<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|k| -> Result<Vec<Vec<f64>>> {
            let mut rng = schedule.stage(Stage::ForecastPath, k as u64);
            let future = simulator.future(input.start, max_h, Some(&active), &mut rng);
            let series = |j: usize| -> Result<Vec<f64>> {
                let d: Vec<f64> = future.iter().map(|x| x[j]).collect();
                extend_levels(tail_of(j), &d).map_err(|reason| {
                    ForecastError::Data(crate::data::DataError::Inversion {
                        series: diffs.series_name(j),
                        reason,
                    })
                })
            };
            let r = series(layout.r())?;
            let s = series(layout.s())?;
            firms
                .iter()
                .map(|&i| {
                    let d = series(layout.d(i))?;
                    let v = series(layout.v(i))?;
                    let path: Vec<[f64; N_COVARIATES]> =
                        (0..max_h).map(|h| [d[h], v[h], r[h], s[h]]).collect();
                    path_default_probability(hazard, &path, horizons)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let nh = horizons.len();
    let mut out = Vec::with_capacity(firms.len());
    for (pos, &i) in firms.iter().enumerate() {
        let samples: Vec<Vec<f64>> = per_path.iter().map(|p| p[pos].clone()).collect();
        let mut rho_hat = vec![0.0; nh];
        for row in &samples {
            for (a, b) in rho_hat.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in rho_hat.iter_mut() {
            *a /= paths as f64;
        }
        out.push(DefaultProbabilityForecast {
            firm_id: diffs.firm_ids()[i].clone(),
            horizons: horizons.to_vec(),
            rho_hat,
            path_samples: samples,
        });
    }
    let mut expected_counts = vec![0.0; nh];
    for f in &out {
        for (a, b) in expected_counts.iter_mut().zip(&f.rho_hat) {
            *a += b;
        }
    }
    Ok(AggregateForecast {
        risk_set: firms.iter().map(|&i| diffs.firm_ids()[i].clone()).collect(),
        horizons: horizons.to_vec(),
        expected_counts,
        firms: out,
        excluded,
        paths,
        seed: schedule.master(),
    })
}

/// Sum over causes of the incidence along a path; at most one.
pub fn path_total_incidence(hazard: &HazardParams, path: &[[f64; N_COVARIATES]], horizons: &[usize]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; horizons.len()];
    for k in 0..N_CAUSES {
        for (t, p) in total.iter_mut().zip(path_cause_probability(hazard, k, path, horizons)?) {
            *t += p;
        }
    }
    Ok(total)
}
