//! Synthetic panels with known covariate dynamics and intensities.
//!
//! Firms enter at random months, their differenced covariates follow the
//! true covariate model from a flat start, and events are drawn month by
//! month with probability `1 - exp(-(lambda_1 + lambda_2))`, the type chosen
//! in proportion to the intensities. The same rule discretises the fitted
//! likelihood, so generator and estimator agree.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EvalError, Result};
use crate::covariate::{CovariateParams, Kappa, Simulator};
use crate::data::{
    difference_order3, EventRecord, EventType, FirmPanel, Grid, ObservationWindow, StateLayout, YearMonth,
    CARRY_FORWARD_CAP,
};
use crate::hazard::HazardParams;
use crate::rng::{SeedSchedule, Stage};

/// Intensity coefficients shared by both causes in the simulation design.
pub const DESIGN_BETA: [f64; 5] = [-5.26, 0.1, -1.2, -0.045, -0.084];

/// Mean-reversion estimates `(kappa_D, kappa_V, kappa_r, kappa_S, b)` used as
/// the default truth.
const KAPPA_TRUTH: [f64; 5] = [0.63766, 0.63551, 0.89208, 0.63546, -0.00714];
const A_TRUTH: [f64; 4] = [0.3734, 0.2144, -0.0599, 0.4803];

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub n: usize,
    /// Months of history `tau`; `tau' = tau - 3`.
    pub history_months: usize,
    /// Months simulated past the origin to score forecasts.
    pub horizon_months: usize,
    /// Latest entry month is `history_months - entry_buffer`.
    pub entry_buffer: usize,
    /// Probability that an interior firm cell is missing.
    pub missing_rate: f64,
    pub beta: HazardParams,
    pub origin: YearMonth,
}

impl ScenarioOptions {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            history_months: 203,
            horizon_months: 12,
            entry_buffer: 24,
            missing_rate: 0.005,
            beta: HazardParams::symmetric(DESIGN_BETA).expect("finite"),
            origin: YearMonth::new(1991, 1).expect("valid month"),
        }
    }
}

/// Fixed truth for one design point.
#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub n: usize,
    pub beta_true: HazardParams,
    pub theta_x_true: CovariateParams,
    /// Differenced history length.
    pub tau_prime: usize,
    pub seed: u64,
    pub options: ScenarioOptions,
    /// First month of each firm.
    pub entries: Vec<usize>,
    /// Starting `(D, V)` levels of each firm.
    pub initial_levels: Vec<[f64; 2]>,
}

/// Invented covariate truth for `n` firms: the published mean-reversion and
/// factor-transition estimates with loadings and noise scales chosen to give
/// plausible monthly moves.
pub fn default_covariate_truth<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CovariateParams {
    let layout = StateLayout::new(n);
    let m = layout.m();
    let mut lambda = DMatrix::zeros(m, 2);
    let mut p = DVector::zeros(m);
    let nd = |mean: f64, sd: f64| Normal::new(mean, sd).expect("valid normal");
    let (d1, d2) = (nd(0.07, 0.02), nd(0.0, 0.03));
    let (v1, v2) = (nd(0.03, 0.01), nd(0.01, 0.01));
    for i in 0..n {
        lambda[(layout.d(i), 0)] = d1.sample(rng);
        lambda[(layout.d(i), 1)] = d2.sample(rng);
        p[layout.d(i)] = 0.12 * 0.12;
        lambda[(layout.v(i), 0)] = v1.sample(rng);
        lambda[(layout.v(i), 1)] = v2.sample(rng);
        p[layout.v(i)] = 0.05 * 0.05;
    }
    lambda[(layout.r(), 0)] = 0.02;
    lambda[(layout.r(), 1)] = 0.03;
    p[layout.r()] = 0.03 * 0.03;
    lambda[(layout.s(), 0)] = 0.03;
    lambda[(layout.s(), 1)] = -0.02;
    p[layout.s()] = 0.04 * 0.04;
    CovariateParams {
        mu: DVector::zeros(m),
        kappa: Kappa::from_array(KAPPA_TRUTH),
        lambda,
        a: DMatrix::from_row_slice(2, 2, &A_TRUTH),
        p,
        q_cov: DMatrix::identity(2, 2) * 0.8,
    }
}

impl SyntheticScenario {
    /// Truth for `options.n` firms reproducible from `seed`. `base` replaces
    /// the default covariate truth when given.
    pub fn new(options: ScenarioOptions, seed: u64, base: Option<&CovariateParams>) -> Result<Self> {
        let n = options.n;
        if n < 2 {
            return Err(EvalError::Domain(format!("scenario needs at least 2 firms, got {n}")));
        }
        if options.history_months < options.entry_buffer + 8 {
            return Err(EvalError::Domain("history too short for the entry buffer".into()));
        }
        let schedule = SeedSchedule::new(seed);
        let mut rng = schedule.stage(Stage::Scenario, 0);
        let theta_x_true = match base {
            Some(p) if p.m() == StateLayout::new(n).m() => p.clone(),
            Some(p) => {
                return Err(EvalError::Domain(format!(
                    "base covariate fit has m = {}, scenario needs {}",
                    p.m(),
                    StateLayout::new(n).m()
                )))
            }
            None => default_covariate_truth(n, &mut rng),
        };
        let last_entry = options.history_months - options.entry_buffer;
        let entries = (0..n).map(|_| rng.random_range(0..=last_entry)).collect();
        let dn = Normal::new(3.0, 1.0).expect("valid normal");
        let vn = Normal::new(0.0, 0.3).expect("valid normal");
        let initial_levels = (0..n).map(|_| [dn.sample(&mut rng), vn.sample(&mut rng)]).collect();
        Ok(Self {
            n,
            beta_true: options.beta.clone(),
            theta_x_true,
            tau_prime: options.history_months - 3,
            seed,
            options,
            entries,
            initial_levels,
        })
    }

    pub fn firm_ids(&self) -> Vec<String> {
        (0..self.n).map(|i| format!("F{i:04}")).collect()
    }

    /// One realisation of covariates and events over history plus horizon.
    pub fn simulate(&self, rep_seed: u64) -> Result<SimulatedWorld> {
        let o = &self.options;
        let tau = o.history_months;
        let total = tau + o.horizon_months;
        let n = self.n;
        let schedule = SeedSchedule::new(self.seed).child(&[Stage::CoverageRep as u64, rep_seed]);
        let mut rng = schedule.stage(Stage::HistorySimulation, 0);

        let mut d = Grid::missing(n, total);
        let mut v = Grid::missing(n, total);
        let mut windows = Vec::with_capacity(n);
        for i in 0..n {
            let e = self.entries[i];
            for t in e..total {
                let interior = t >= e + 3;
                if !(interior && rng.random::<f64>() < o.missing_rate) {
                    d.set(i, t, self.initial_levels[i][0]);
                }
                if !(interior && rng.random::<f64>() < o.missing_rate) {
                    v.set(i, t, self.initial_levels[i][1]);
                }
            }
            windows.push(ObservationWindow { first: e, last: total - 1 });
        }
        let template = FirmPanel::new(
            self.firm_ids(),
            o.origin.range(total),
            d,
            v,
            vec![4.0; total],
            vec![0.06; total],
            windows,
        )?;
        let diffs = difference_order3(&template)?;
        let simulator = Simulator::new(&self.theta_x_true)?;
        let (covariates, _) = simulator.historical(&template, &diffs, &mut rng)?;

        let mut event_rng = schedule.stage(Stage::CountDraw, 0);
        let (full_panel, full_events) = simulate_events(&covariates, &self.beta_true, &mut event_rng)?;

        let history = full_panel.truncate(tau)?;
        let events: Vec<EventRecord> = full_events
            .iter()
            .map(|e| {
                if e.event_time <= tau {
                    e.clone()
                } else {
                    EventRecord {
                        firm_id: e.firm_id.clone(),
                        event_time: tau,
                        event: EventType::Censored,
                    }
                }
            })
            .collect();
        let risk_set = crate::forecast::risk_set(&history, &events);
        let future_defaults = (1..=o.horizon_months)
            .map(|s| {
                risk_set
                    .iter()
                    .filter(|&&i| {
                        let e = &full_events[i];
                        e.event == EventType::Default && e.event_time <= tau + s
                    })
                    .count()
            })
            .collect();
        Ok(SimulatedWorld {
            history,
            events,
            full_panel,
            full_events,
            risk_set,
            future_defaults,
        })
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct SimulatedWorld {
    /// Panel through the origin `tau`.
    pub history: FirmPanel,
    /// Events as seen at `tau` (later events censored at `tau`).
    pub events: Vec<EventRecord>,
    pub full_panel: FirmPanel,
    pub full_events: Vec<EventRecord>,
    /// Firm indices at risk at `tau`.
    pub risk_set: Vec<usize>,
    /// Realised cumulative defaults in the risk set by month `1..=horizon`.
    pub future_defaults: Vec<usize>,
}

/// Draws competing-risk events month by month on `panel`'s covariates
/// (carried forward over short gaps). Firms stop being observed after their
/// event; firms without an event are censored at the last month. Returns
/// the panel with post-event cells removed and the events.
pub fn simulate_events<R: Rng + ?Sized>(
    panel: &FirmPanel,
    beta: &HazardParams,
    rng: &mut R,
) -> Result<(FirmPanel, Vec<EventRecord>)> {
    let n = panel.n_firms();
    let tau = panel.n_months();
    let mut d = panel.distance_to_default().clone();
    let mut v = panel.stock_return().clone();
    let mut windows = panel.windows().to_vec();
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let mut outcome = None;
        for t in windows[i].first..=windows[i].last {
            let Some(x) = panel.carried_covariates(i, t, CARRY_FORWARD_CAP) else {
                continue;
            };
            let rates = beta.rates(&x);
            let total = rates[0] + rates[1];
            let u: f64 = rng.random();
            let w: f64 = rng.random();
            if u < 1.0 - (-total).exp() {
                let kind = if w * total < rates[0] {
                    EventType::Default
                } else {
                    EventType::OtherExit
                };
                outcome = Some((t, kind));
                break;
            }
        }
        match outcome {
            Some((t, kind)) => {
                for u in t + 1..tau {
                    d.clear(i, u);
                    v.clear(i, u);
                }
                windows[i].last = t;
                events.push(EventRecord {
                    firm_id: panel.firm_ids()[i].clone(),
                    event_time: t + 1,
                    event: kind,
                });
            }
            None => events.push(EventRecord {
                firm_id: panel.firm_ids()[i].clone(),
                event_time: tau,
                event: EventType::Censored,
            }),
        }
    }
    let panel = FirmPanel::new(
        panel.firm_ids().to_vec(),
        panel.time_index().to_vec(),
        d,
        v,
        panel.rate().to_vec(),
        panel.index_return().to_vec(),
        windows,
    )?;
    Ok((panel, events))
}

/// Truth plus one simulated history (panel and events through `tau`).
pub fn generate_scenario(
    n: usize,
    seed: u64,
    base: Option<&CovariateParams>,
) -> Result<(SyntheticScenario, FirmPanel, Vec<EventRecord>)> {
    let scenario = SyntheticScenario::new(ScenarioOptions::new(n), seed, base)?;
    let world = scenario.simulate(0)?;
    Ok((scenario, world.history, world.events))
}
