//! Batch front end: fit, predict, interval, simulate and evaluate.
//!
//! Every run writes its outputs plus `manifest.json` (resolved settings,
//! inputs, outputs, seed, version, timings) into `--out`. Exit code 0 on
//! success, 1 on bad input or usage, 2 on numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use default_risk::covariate::{fit_em, CovariateModelFit, CovariateParams, EmOptions, SimulationStart};
use default_risk::data::{difference_order3, load_panel, write_events_csv, DifferencedPanel, EventRecord, FirmPanel};
use default_risk::eval::{
    coverage_study, logistic_interaction, power_curve, write_coverage_csv, write_logistic_csv, write_roc_csv,
    CoverageConfig, ScenarioOptions, SyntheticScenario,
};
use default_risk::forecast::{predict, risk_set, ForecastInput};
use default_risk::hazard::{self, FitOptions, HazardFit};
use default_risk::rng::SeedSchedule;
use default_risk::uncertainty::{
    aggregate_pi, individual_pi, min_replicates, write_intervals_csv, ReplicateConfig, ReplicateContext,
    ReplicateMode, ReplicateSet,
};

const THREADS_ENV: &str = "DEFAULT_HORIZON_THREADS";

#[derive(Parser, Debug)]
#[command(name = "default-risk", version, about = "Multiperiod default forecasting with calibrated prediction intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit the competing-risks hazard model.
    FitHazard,
    /// Fit the covariate model on the differenced panel.
    FitCovariates,
    /// Monte Carlo default-probability forecasts for the risk set.
    Predict,
    /// Naive and calibrated intervals for the cumulative default count.
    PiAggregate,
    /// Calibrated intervals for each firm's default probability.
    PiIndividual,
    /// Write a synthetic panel and its realised future defaults.
    Simulate,
    /// Coverage study of the aggregate intervals on synthetic panels.
    Coverage,
    /// Power curve and AUC of scores against realised defaults.
    Roc,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Event records CSV.
    #[arg(long, global = true)]
    events: Option<PathBuf>,
    /// Firm covariates CSV.
    #[arg(long, global = true)]
    firms: Option<PathBuf>,
    /// Macro covariates CSV.
    #[arg(long = "macro", global = true)]
    macro_path: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of dynamic factors.
    #[arg(long, global = true)]
    q: Option<usize>,
    /// Monte Carlo paths per forecast.
    #[arg(long = "M", global = true)]
    paths: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long = "B", global = true)]
    replicates: Option<usize>,
    /// Interval alpha, or a comma-separated list.
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// Horizons in months: `1..12`, `1,3,6` or `6`.
    #[arg(long, global = true)]
    horizons: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to DEFAULT_HORIZON_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Convergence tolerance for the hazard and covariate fits.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Saved hazard fit to use instead of fitting.
    #[arg(long, global = true)]
    hazard_fit: Option<PathBuf>,
    /// Saved covariate fit to use instead of fitting.
    #[arg(long, global = true)]
    covariate_fit: Option<PathBuf>,
    /// Firm counts for `simulate` and `coverage`, comma-separated.
    #[arg(long, global = true)]
    n: Option<String>,
    /// Coverage repetitions per grid point.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Months of simulated history.
    #[arg(long, global = true)]
    months: Option<usize>,
    /// Scores CSV for `roc` with columns `score`, `default` and optionally `width`.
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    /// Also fit the PI-width logistic regression in `roc`.
    #[arg(long, global = true)]
    logistic: bool,
}

/// Values accepted in the JSON config file. `alpha`, `horizons` and `n`
/// take either a scalar or a list.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    events: Option<PathBuf>,
    firms: Option<PathBuf>,
    #[serde(rename = "macro")]
    macro_path: Option<PathBuf>,
    out: Option<PathBuf>,
    q: Option<usize>,
    #[serde(rename = "M")]
    paths: Option<usize>,
    #[serde(rename = "B")]
    replicates: Option<usize>,
    alpha: Option<OneOrMany<f64>>,
    horizons: Option<Value>,
    seed: Option<u64>,
    threads: Option<usize>,
    tol: Option<f64>,
    hazard_fit: Option<PathBuf>,
    covariate_fit: Option<PathBuf>,
    n: Option<OneOrMany<usize>>,
    reps: Option<usize>,
    months: Option<usize>,
    scores: Option<PathBuf>,
    logistic: Option<bool>,
}

#[derive(Deserialize, Debug)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Fully resolved settings of one run; recorded in the manifest.
#[derive(Serialize, Debug)]
struct RunConfig {
    command: Command,
    events: Option<PathBuf>,
    firms: Option<PathBuf>,
    #[serde(rename = "macro")]
    macro_path: Option<PathBuf>,
    out: PathBuf,
    q: usize,
    #[serde(rename = "M")]
    paths: usize,
    #[serde(rename = "B")]
    replicates: usize,
    alpha: Vec<f64>,
    horizons: Vec<usize>,
    seed: u64,
    threads: Option<usize>,
    tol: f64,
    hazard_fit: Option<PathBuf>,
    covariate_fit: Option<PathBuf>,
    n: Vec<usize>,
    reps: usize,
    months: usize,
    scores: Option<PathBuf>,
    logistic: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

macro_rules! from_library_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                if e.is_numerical() {
                    CliError::Numerical(e.to_string())
                } else {
                    CliError::Invalid(e.to_string())
                }
            }
        }
    )*};
}

from_library_error!(
    default_risk::Error,
    default_risk::data::DataError,
    default_risk::hazard::HazardError,
    default_risk::covariate::CovariateError,
    default_risk::forecast::ForecastError,
    default_risk::uncertainty::UncertaintyError,
    default_risk::eval::EvalError
);

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| invalid(format!("{}: {e}", path.display()))
}

fn parse_horizons(s: &str) -> Result<Vec<usize>> {
    let bad = || invalid(format!("invalid horizons '{s}'"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| invalid(format!("invalid {what} '{s}'"))))
        .collect()
}

fn horizons_from_json(v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::String(s) => parse_horizons(s),
        Value::Number(_) | Value::Array(_) => serde_json::from_value::<OneOrMany<usize>>(v.clone())
            .map(OneOrMany::into_vec)
            .map_err(|e| invalid(format!("config: invalid horizons: {e}"))),
        _ => Err(invalid("config: horizons must be a string, number or list")),
    }
}

impl RunConfig {
    /// Flags over config file over environment over defaults.
    fn resolve(command: Command, flags: Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                serde_json::from_str::<FileConfig>(&text)
                    .map_err(|e| invalid(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let alpha = match flags.alpha {
            Some(s) => parse_list(&s, "alpha")?,
            None => file.alpha.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0.05]),
        };
        let horizons = match (flags.horizons, file.horizons) {
            (Some(s), _) => parse_horizons(&s)?,
            (None, Some(v)) => horizons_from_json(&v)?,
            (None, None) if command == Command::Coverage => (1..=6).collect(),
            (None, None) => (1..=12).collect(),
        };
        let n = match flags.n {
            Some(s) => parse_list(&s, "n")?,
            None => file.n.map(OneOrMany::into_vec).unwrap_or_else(|| vec![100]),
        };
        let threads = match flags.threads.or(file.threads) {
            Some(t) => Some(t),
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => Some(
                    v.trim()
                        .parse()
                        .map_err(|_| invalid(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
                ),
                Err(_) => None,
            },
        };
        let cfg = RunConfig {
            command,
            events: flags.events.or(file.events),
            firms: flags.firms.or(file.firms),
            macro_path: flags.macro_path.or(file.macro_path),
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from(".")),
            q: flags.q.or(file.q).unwrap_or(2),
            paths: flags.paths.or(file.paths).unwrap_or(1000),
            replicates: flags.replicates.or(file.replicates).unwrap_or(200),
            alpha,
            horizons,
            seed: flags.seed.or(file.seed).unwrap_or(1),
            threads,
            tol: flags.tol.or(file.tol).unwrap_or(1e-6),
            hazard_fit: flags.hazard_fit.or(file.hazard_fit),
            covariate_fit: flags.covariate_fit.or(file.covariate_fit),
            n,
            reps: flags.reps.or(file.reps).unwrap_or(20),
            months: flags.months.or(file.months).unwrap_or(203),
            scores: flags.scores.or(file.scores),
            logistic: flags.logistic || file.logistic.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(invalid("--q must be at least 1"));
        }
        if self.paths == 0 {
            return Err(invalid("--M must be at least 1"));
        }
        if self.alpha.is_empty() {
            return Err(invalid("--alpha needs at least one value"));
        }
        for &a in &self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid(format!("--alpha {a} is outside (0, 1)")));
            }
            let uses_b = matches!(
                self.command,
                Command::PiAggregate | Command::PiIndividual | Command::Coverage
            );
            if uses_b && self.replicates < min_replicates(a) {
                return Err(invalid(format!(
                    "--B {} is below 2/alpha = {} for alpha = {a}",
                    self.replicates,
                    min_replicates(a)
                )));
            }
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(invalid("--horizons must be positive months"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid("--tol must be positive"));
        }
        if self.threads == Some(0) {
            return Err(invalid("--threads must be at least 1"));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(invalid("--n must list positive firm counts"));
        }
        if self.reps == 0 {
            return Err(invalid("--reps must be at least 1"));
        }
        Ok(())
    }

    fn em_options(&self) -> EmOptions {
        EmOptions {
            q: self.q,
            tol: self.tol,
            ..EmOptions::default()
        }
    }

    fn hazard_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            ..FitOptions::default()
        }
    }

    fn input(&self, path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let path = path
            .clone()
            .ok_or_else(|| invalid(format!("{:?} needs --{flag}", self.command_name())))?;
        if !path.is_file() {
            return Err(invalid(format!("input file not found: {}", path.display())));
        }
        Ok(path)
    }

    fn command_name(&self) -> String {
        serde_json::to_value(self.command)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

/// Records what a run read, wrote and how long each stage took.
struct Manifest {
    started: Instant,
    inputs: Vec<Value>,
    outputs: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
    results: serde_json::Map<String, Value>,
}

impl Manifest {
    fn new() -> Self {
        Self {
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            results: serde_json::Map::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) {
        let bytes = std::fs::metadata(path).map(|m| m.len()).ok();
        self.inputs.push(json!({ "role": role, "path": path, "bytes": bytes }));
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.timings.push((name.to_owned(), t0.elapsed().as_secs_f64() * 1e3));
        out
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> Result<()> {
        std::fs::write(&path, text).map_err(io_err(&path))?;
        self.outputs.push(path);
        Ok(())
    }

    fn wrote(&mut self, path: PathBuf, res: std::io::Result<()>) -> Result<()> {
        res.map_err(io_err(&path))?;
        self.outputs.push(path);
        Ok(())
    }

    fn to_json(&self, cfg: &RunConfig, status: &Result<()>) -> Value {
        let timings: serde_json::Map<String, Value> =
            self.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let (status, code, error) = match status {
            Ok(()) => ("ok", 0, None),
            Err(e) => ("error", e.exit_code(), Some(e.to_string())),
        };
        json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": cfg.command,
            "config": cfg,
            "seed": cfg.seed,
            "threads": rayon::current_num_threads(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.results,
            "timings_ms": timings,
            "total_ms": self.started.elapsed().as_secs_f64() * 1e3,
            "status": status,
            "exit_code": code,
            "error": error,
        })
    }
}

struct Inputs {
    panel: FirmPanel,
    events: Vec<EventRecord>,
}

fn load_inputs(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Inputs> {
    let events = cfg.input(&cfg.events, "events")?;
    let firms = cfg.input(&cfg.firms, "firms")?;
    let macros = cfg.input(&cfg.macro_path, "macro")?;
    manifest.input("events", &events);
    manifest.input("firms", &firms);
    manifest.input("macro", &macros);
    let (panel, events) = manifest.stage("load", || Ok(load_panel(&events, &firms, &macros)?))?;
    log::info!("loaded {} firms over {} months", panel.n_firms(), panel.n_months());
    Ok(Inputs { panel, events })
}

fn hazard_fit(cfg: &RunConfig, data: &Inputs, manifest: &mut Manifest) -> Result<HazardFit> {
    if let Some(path) = &cfg.hazard_fit {
        let path = cfg.input(&Some(path.clone()), "hazard-fit")?;
        manifest.input("hazard_fit", &path);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        return Ok(HazardFit::from_json(&text)?);
    }
    let fit = manifest.stage("fit_hazard", || {
        Ok(hazard::fit(&data.events, &data.panel, None, &cfg.hazard_options())?)
    })?;
    manifest.results.insert("hazard_loglik".into(), json!(fit.log_likelihood));
    Ok(fit)
}

struct Covariates {
    diffs: DifferencedPanel,
    params: CovariateParams,
    fit: Option<CovariateModelFit>,
}

fn covariate_fit(cfg: &RunConfig, data: &Inputs, manifest: &mut Manifest) -> Result<Covariates> {
    let diffs = difference_order3(&data.panel)?;
    if let Some(path) = &cfg.covariate_fit {
        let path = cfg.input(&Some(path.clone()), "covariate-fit")?;
        manifest.input("covariate_fit", &path);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let (params, _, _) = CovariateModelFit::params_from_json(&text)?;
        if params.m() != diffs.layout().m() {
            return Err(invalid(format!(
                "{} has {} series but the panel has {}",
                path.display(),
                params.m(),
                diffs.layout().m()
            )));
        }
        return Ok(Covariates {
            diffs,
            params,
            fit: None,
        });
    }
    let fit = manifest.stage("fit_covariates", || Ok(fit_em(&diffs, &cfg.em_options())?))?;
    manifest
        .results
        .insert("covariate_loglik".into(), json!(fit.loglik_trace.last()));
    manifest.results.insert("em_iterations".into(), json!(fit.iterations));
    Ok(Covariates {
        diffs,
        params: fit.params.clone(),
        fit: Some(fit),
    })
}

fn run_fit_hazard(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let data = load_inputs(cfg, m)?;
    let fit = hazard_fit(cfg, &data, m)?;
    m.results.insert("converged".into(), json!(fit.converged));
    m.write_text(cfg.out.join("hazard_fit.json"), &fit.to_json())
}

fn run_fit_covariates(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let data = load_inputs(cfg, m)?;
    let cov = covariate_fit(cfg, &data, m)?;
    let fit = cov.fit.ok_or_else(|| invalid("fit-covariates does not take --covariate-fit"))?;
    m.results.insert("converged".into(), json!(fit.converged));
    m.write_text(cfg.out.join("covariate_fit.json"), &fit.to_json())
}

fn run_predict(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let data = load_inputs(cfg, m)?;
    let hfit = hazard_fit(cfg, &data, m)?;
    let cov = covariate_fit(cfg, &data, m)?;
    let start = match &cov.fit {
        Some(fit) => SimulationStart::from_fit(fit, &cov.diffs),
        None => SimulationStart::from_panel(&cov.params, &cov.diffs)?,
    };
    let risk = risk_set(&data.panel, &data.events);
    let forecast = m.stage("predict", || {
        Ok(predict(
            &ForecastInput {
                hazard: &hfit.params,
                covariates: &cov.params,
                diffs: &cov.diffs,
                start: &start,
                risk_set: &risk,
            },
            &cfg.horizons,
            cfg.paths,
            &SeedSchedule::new(cfg.seed),
        )?)
    })?;
    m.results.insert("expected_counts".into(), json!(forecast.expected_counts));
    let path = cfg.out.join("forecast.csv");
    m.wrote(path.clone(), forecast.write_csv(&path))?;
    m.write_text(cfg.out.join("forecast.json"), &forecast.sidecar_json())
}

fn run_intervals(cfg: &RunConfig, m: &mut Manifest, mode: ReplicateMode) -> Result<()> {
    let data = load_inputs(cfg, m)?;
    let hfit = hazard_fit(cfg, &data, m)?;
    let cov = covariate_fit(cfg, &data, m)?;
    let risk = risk_set(&data.panel, &data.events);
    let ctx = ReplicateContext {
        hazard: &hfit,
        covariates: &cov.params,
        panel: &data.panel,
        diffs: &cov.diffs,
        risk_set: &risk,
    };
    let config = ReplicateConfig {
        horizons: cfg.horizons.clone(),
        paths: cfg.paths,
        em: ReplicateConfig::relaxed_em(&cfg.em_options()),
        mode,
    };
    let schedule = SeedSchedule::new(cfg.seed);
    let (intervals, set): (_, ReplicateSet) = m.stage("bootstrap", || {
        Ok(match mode {
            ReplicateMode::Aggregate => aggregate_pi(&ctx, &config, &cfg.alpha, cfg.replicates, &schedule)?,
            ReplicateMode::Individual => individual_pi(&ctx, &config, &cfg.alpha, cfg.replicates, &schedule)?,
        })
    })?;
    m.results.insert("replicates".into(), json!(set.len()));
    m.results.insert("dropped".into(), json!(set.dropped));
    let name = match mode {
        ReplicateMode::Aggregate => "pi_aggregate.csv",
        ReplicateMode::Individual => "pi_individual.csv",
    };
    let path = cfg.out.join(name);
    m.wrote(path.clone(), write_intervals_csv(&path, &intervals))?;
    let log = cfg.out.join("replicates.jsonl");
    m.wrote(log.clone(), set.write_audit_log(&log))
}

fn run_simulate(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let mut opts = ScenarioOptions::new(cfg.n[0]);
    opts.history_months = cfg.months;
    opts.horizon_months = cfg.horizons.iter().copied().max().unwrap_or(12);
    let world = m.stage("simulate", || {
        Ok(SyntheticScenario::new(opts, cfg.seed, None)?.simulate(0)?)
    })?;
    let (events, firms, macros) = (cfg.out.join("events.csv"), cfg.out.join("firms.csv"), cfg.out.join("macro.csv"));
    m.wrote(events.clone(), write_events_csv(&events, &world.history, &world.events))?;
    world.history.write_csv(&firms, &macros).map_err(io_err(&firms))?;
    m.outputs.push(firms);
    m.outputs.push(macros);
    let mut truth = String::from("horizon_months,cumulative_defaults\n");
    for (h, d) in world.future_defaults.iter().enumerate() {
        truth.push_str(&format!("{},{d}\n", h + 1));
    }
    m.write_text(cfg.out.join("future_defaults.csv"), &truth)?;
    m.results.insert("risk_set_size".into(), json!(world.risk_set.len()));
    Ok(())
}

fn run_coverage(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let mut cc = CoverageConfig::new(cfg.n.clone(), cfg.reps);
    cc.scenario.history_months = cfg.months;
    cc.levels = cfg.alpha.iter().map(|a| 1.0 - a).collect();
    cc.horizons = cfg.horizons.clone();
    cc.b = cfg.replicates;
    cc.paths = cfg.paths;
    cc.em = cfg.em_options();
    cc.hazard = cfg.hazard_options();
    cc.seed = cfg.seed;
    let table = m.stage("coverage", || Ok(coverage_study(&cc)?))?;
    m.results.insert("failed_reps".into(), json!(table.failed));
    let path = cfg.out.join("coverage.csv");
    m.wrote(path.clone(), write_coverage_csv(&path, &table))
}

#[derive(Deserialize)]
struct ScoreRow {
    score: f64,
    default: u8,
    width: Option<f64>,
}

fn run_roc(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    let path = cfg.input(&cfg.scores, "scores")?;
    m.input("scores", &path);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut scores = Vec::new();
    let mut outcomes = Vec::new();
    let mut widths = Vec::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| invalid(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if row.default > 1 {
            return Err(invalid(format!("{}: row {}: default must be 0 or 1", path.display(), i + 1)));
        }
        scores.push(row.score);
        outcomes.push(row.default == 1);
        widths.push(row.width);
    }
    let curve = power_curve(&scores, &outcomes)?;
    m.results.insert("auc".into(), json!(curve.auc));
    let roc = cfg.out.join("roc.csv");
    m.wrote(roc.clone(), write_roc_csv(&roc, &curve))?;
    if cfg.logistic {
        let widths: Vec<f64> = widths
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| invalid(format!("{}: --logistic needs a width column", path.display())))?;
        let fit = logistic_interaction(&outcomes, &scores, &widths)?;
        m.results.insert("logistic_separation".into(), json!(fit.separation));
        let out = cfg.out.join("logistic.csv");
        m.wrote(out.clone(), write_logistic_csv(&out, &fit))?;
    }
    Ok(())
}

fn execute(cfg: &RunConfig, m: &mut Manifest) -> Result<()> {
    match cfg.command {
        Command::FitHazard => run_fit_hazard(cfg, m),
        Command::FitCovariates => run_fit_covariates(cfg, m),
        Command::Predict => run_predict(cfg, m),
        Command::PiAggregate => run_intervals(cfg, m, ReplicateMode::Aggregate),
        Command::PiIndividual => run_intervals(cfg, m, ReplicateMode::Individual),
        Command::Simulate => run_simulate(cfg, m),
        Command::Coverage => run_coverage(cfg, m),
        Command::Roc => run_roc(cfg, m),
    }
}

fn run(args: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match RunConfig::resolve(cli.command, cli.flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(t) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    if let Err(e) = std::fs::create_dir_all(&cfg.out) {
        eprintln!("error: cannot create {}: {e}", cfg.out.display());
        return 1;
    }
    let mut manifest = Manifest::new();
    let status = execute(&cfg, &mut manifest);
    let text = serde_json::to_string_pretty(&manifest.to_json(&cfg, &status)).expect("manifest serialises");
    if let Err(e) = std::fs::write(cfg.out.join("manifest.json"), text) {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }
    match status {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args().collect()))
}
