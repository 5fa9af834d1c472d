//! Firm/macro covariate panel, event records, and the order-3 seasonal
//! differencing used by the covariate model.
//!
//! Missing cells are stored as `NaN` inside [`Grid`] and exposed as
//! `Option<f64>` through the accessors. Months are integer indices into a
//! uniform monthly `time_index`; event times count months from the panel
//! origin, so month `t` (1-based) is `time_index[t - 1]`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Differencing lag (quarterly seasonality on monthly data).
pub const DIFF_LAG: usize = 3;

/// Longest gap, in months, over which a firm covariate is carried forward.
pub const CARRY_FORWARD_CAP: usize = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("cannot read {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("insufficient history: need at least {needed} months, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("cannot invert differencing for {series}: {reason}")]
    Inversion { series: String, reason: String },
}

impl DataError {
    pub fn is_numerical(&self) -> bool {
        false
    }
}

type Result<T> = std::result::Result<T, DataError>;

/// Calendar month label, formatted `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn ordinal(&self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn offset(&self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }

    /// `n` consecutive months starting at `self`.
    pub fn range(&self, n: usize) -> Vec<YearMonth> {
        (0..n as i64).map(|k| self.offset(k)).collect()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("month `{s}` is not YYYY-MM"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in `{s}`"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in `{s}`"))?;
        YearMonth::new(year, month).ok_or_else(|| format!("month out of range in `{s}`"))
    }
}

/// Row-major `rows x cols` matrix of optional reals; `NaN` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn missing(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![f64::NAN; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged grid rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let v = self.data[r * self.cols + c];
        (!v.is_nan()).then_some(v)
    }

    /// Raw cell (`NaN` when missing).
    #[inline]
    pub fn raw(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn clear(&mut self, r: usize, c: usize) {
        self.set(r, c, f64::NAN);
    }

    pub fn is_observed(&self, r: usize, c: usize) -> bool {
        !self.raw(r, c).is_nan()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn observed_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Competing-risk outcome of a firm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Default,
    #[serde(rename = "exit")]
    OtherExit,
    Censored,
}

impl EventType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::Default => "default",
            EventType::OtherExit => "exit",
            EventType::Censored => "censored",
        }
    }

    /// Index into the K = 2 intensity rows, `None` when censored.
    pub fn cause(&self) -> Option<usize> {
        match self {
            EventType::Default => Some(0),
            EventType::OtherExit => Some(1),
            EventType::Censored => None,
        }
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "default" => Ok(EventType::Default),
            "exit" => Ok(EventType::OtherExit),
            "censored" => Ok(EventType::Censored),
            other => Err(format!("unknown event_type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub firm_id: String,
    /// Months since the panel origin, in `1..=tau`.
    pub event_time: usize,
    pub event: EventType,
}

/// Inclusive range of 0-based month indices in which a firm is on the panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationWindow {
    pub first: usize,
    pub last: usize,
}

impl ObservationWindow {
    pub fn contains(&self, t: usize) -> bool {
        (self.first..=self.last).contains(&t)
    }
}

/// Index map of the stacked state vector `(D_1..D_n, V_1..V_n, r, S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
}

impl StateLayout {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn m(&self) -> usize {
        2 * self.n + 2
    }

    pub fn d(&self, firm: usize) -> usize {
        firm
    }

    pub fn v(&self, firm: usize) -> usize {
        self.n + firm
    }

    pub fn r(&self) -> usize {
        2 * self.n
    }

    pub fn s(&self) -> usize {
        2 * self.n + 1
    }

    /// Firm owning a stacked row, `None` for the macro rows.
    pub fn firm_of(&self, row: usize) -> Option<usize> {
        (row < 2 * self.n).then_some(row % self.n)
    }
}

/// Levels of the firm and macro covariates on a uniform monthly grid.
#[derive(Debug, Clone)]
pub struct FirmPanel {
    firm_ids: Vec<String>,
    time_index: Vec<YearMonth>,
    distance_to_default: Grid,
    stock_return: Grid,
    rate: Vec<f64>,
    index_return: Vec<f64>,
    windows: Vec<ObservationWindow>,
    lookup: HashMap<String, usize>,
}

impl FirmPanel {
    /// Builds a panel and checks its invariants: uniform monthly time index,
    /// fully observed macro series, and firm cells only inside windows.
    pub fn new(
        firm_ids: Vec<String>,
        time_index: Vec<YearMonth>,
        distance_to_default: Grid,
        stock_return: Grid,
        rate: Vec<f64>,
        index_return: Vec<f64>,
        windows: Vec<ObservationWindow>,
    ) -> Result<Self> {
        let tau = time_index.len();
        let n = firm_ids.len();
        if time_index.windows(2).any(|w| w[1].ordinal() != w[0].ordinal() + 1) {
            return Err(DataError::Validation(
                "time index must be strictly increasing with monthly spacing".into(),
            ));
        }
        for (name, g) in [("D", &distance_to_default), ("V", &stock_return)] {
            if g.rows() != n || g.cols() != tau {
                return Err(DataError::Validation(format!(
                    "{name} grid is {}x{}, expected {n}x{tau}",
                    g.rows(),
                    g.cols()
                )));
            }
        }
        if rate.len() != tau || index_return.len() != tau {
            return Err(DataError::Validation(
                "macro series must cover the full time index".into(),
            ));
        }
        if rate.iter().chain(&index_return).any(|v| !v.is_finite()) {
            return Err(DataError::Validation(
                "macro series must be fully observed and finite".into(),
            ));
        }
        if windows.len() != n {
            return Err(DataError::Validation("one window per firm required".into()));
        }
        let mut lookup = HashMap::with_capacity(n);
        for (i, id) in firm_ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(DataError::Validation(format!("duplicate firm id `{id}`")));
            }
            let w = windows[i];
            if w.first > w.last || w.last >= tau {
                return Err(DataError::Validation(format!(
                    "firm `{id}` has an invalid observation window"
                )));
            }
            for t in 0..tau {
                for g in [&distance_to_default, &stock_return] {
                    let v = g.raw(i, t);
                    if !v.is_nan() && (!w.contains(t) || !v.is_finite()) {
                        return Err(DataError::Validation(format!(
                            "firm `{id}` has a non-finite or out-of-window cell at {}",
                            time_index[t]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            firm_ids,
            time_index,
            distance_to_default,
            stock_return,
            rate,
            index_return,
            windows,
            lookup,
        })
    }

    /// Rebuilds a panel from a stacked `m x tau` level grid.
    pub fn from_stacked(
        firm_ids: Vec<String>,
        time_index: Vec<YearMonth>,
        stacked: &Grid,
        windows: Vec<ObservationWindow>,
    ) -> Result<Self> {
        let n = firm_ids.len();
        let layout = StateLayout::new(n);
        let tau = time_index.len();
        if stacked.rows() != layout.m() || stacked.cols() != tau {
            return Err(DataError::Validation("stacked grid has wrong shape".into()));
        }
        let mut d = Grid::missing(n, tau);
        let mut v = Grid::missing(n, tau);
        for i in 0..n {
            d.row_mut(i).copy_from_slice(stacked.row(layout.d(i)));
            v.row_mut(i).copy_from_slice(stacked.row(layout.v(i)));
        }
        Self::new(
            firm_ids,
            time_index,
            d,
            v,
            stacked.row(layout.r()).to_vec(),
            stacked.row(layout.s()).to_vec(),
            windows,
        )
    }

    pub fn n_firms(&self) -> usize {
        self.firm_ids.len()
    }

    /// Number of months, `tau`.
    pub fn n_months(&self) -> usize {
        self.time_index.len()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.n_firms())
    }

    pub fn firm_ids(&self) -> &[String] {
        &self.firm_ids
    }

    pub fn firm_index(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn time_index(&self) -> &[YearMonth] {
        &self.time_index
    }

    pub fn windows(&self) -> &[ObservationWindow] {
        &self.windows
    }

    pub fn distance_to_default(&self) -> &Grid {
        &self.distance_to_default
    }

    pub fn stock_return(&self) -> &Grid {
        &self.stock_return
    }

    pub fn rate(&self) -> &[f64] {
        &self.rate
    }

    pub fn index_return(&self) -> &[f64] {
        &self.index_return
    }

    /// Levels stacked as an `m x tau` grid in [`StateLayout`] order.
    pub fn stacked_levels(&self) -> Grid {
        let layout = self.layout();
        let tau = self.n_months();
        let mut g = Grid::missing(layout.m(), tau);
        for i in 0..self.n_firms() {
            g.row_mut(layout.d(i))
                .copy_from_slice(self.distance_to_default.row(i));
            g.row_mut(layout.v(i)).copy_from_slice(self.stock_return.row(i));
        }
        g.row_mut(layout.r()).copy_from_slice(&self.rate);
        g.row_mut(layout.s()).copy_from_slice(&self.index_return);
        g
    }

    /// Covariates `(D, V, r, S)` of `firm` at month index `t`, carrying each
    /// firm covariate forward from its latest observation at most `cap`
    /// months back (and never from before the firm's window).
    pub fn carried_covariates(&self, firm: usize, t: usize, cap: usize) -> Option<[f64; 4]> {
        let w = self.windows[firm];
        if t < w.first {
            return None;
        }
        let d = carry_back(self.distance_to_default.row(firm), w.first, t, cap)?;
        let v = carry_back(self.stock_return.row(firm), w.first, t, cap)?;
        Some([d, v, self.rate[t], self.index_return[t]])
    }

    /// Panel restricted to the first `months` months. Firms whose window
    /// starts at or after the cut are dropped; windows are clipped.
    pub fn truncate(&self, months: usize) -> Result<FirmPanel> {
        if months == 0 || months > self.n_months() {
            return Err(DataError::Validation(format!(
                "cannot truncate a {}-month panel to {months} months",
                self.n_months()
            )));
        }
        let keep: Vec<usize> = (0..self.n_firms())
            .filter(|&i| self.windows[i].first < months)
            .collect();
        let mut d = Grid::missing(keep.len(), months);
        let mut v = Grid::missing(keep.len(), months);
        let mut windows = Vec::with_capacity(keep.len());
        for (k, &i) in keep.iter().enumerate() {
            d.row_mut(k)
                .copy_from_slice(&self.distance_to_default.row(i)[..months]);
            v.row_mut(k).copy_from_slice(&self.stock_return.row(i)[..months]);
            let w = self.windows[i];
            windows.push(ObservationWindow {
                first: w.first,
                last: w.last.min(months - 1),
            });
        }
        FirmPanel::new(
            keep.iter().map(|&i| self.firm_ids[i].clone()).collect(),
            self.time_index[..months].to_vec(),
            d,
            v,
            self.rate[..months].to_vec(),
            self.index_return[..months].to_vec(),
            windows,
        )
    }

    /// Writes `firms.csv` and `macro.csv` in the ingestion schema.
    pub fn write_csv(&self, firm_path: &Path, macro_path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(File::create(firm_path)?);
        writeln!(f, "firm_id,month,D,V")?;
        for i in 0..self.n_firms() {
            let w = self.windows[i];
            for t in w.first..=w.last {
                writeln!(
                    f,
                    "{},{},{},{}",
                    self.firm_ids[i],
                    self.time_index[t],
                    fmt_cell(self.distance_to_default.get(i, t)),
                    fmt_cell(self.stock_return.get(i, t))
                )?;
            }
        }
        f.flush()?;
        let mut m = std::io::BufWriter::new(File::create(macro_path)?);
        writeln!(m, "month,r,S")?;
        for t in 0..self.n_months() {
            writeln!(
                m,
                "{},{},{}",
                self.time_index[t],
                CsvFloat(self.rate[t]),
                CsvFloat(self.index_return[t])
            )?;
        }
        m.flush()
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| CsvFloat(x).to_string()).unwrap_or_default()
}

/// Shortest round-tripping text for a float, switching to exponent form
/// for very small or very large magnitudes.
#[derive(Debug, Clone, Copy)]
pub struct CsvFloat(pub f64);

impl fmt::Display for CsvFloat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.0.abs();
        if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
            write!(f, "{}", self.0)
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

fn carry_back(row: &[f64], floor: usize, t: usize, cap: usize) -> Option<f64> {
    let lo = floor.max(t.saturating_sub(cap));
    (lo..=t).rev().map(|u| row[u]).find(|v| !v.is_nan())
}

pub fn write_events_csv(path: &Path, panel: &FirmPanel, events: &[EventRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "firm_id,event_month,event_type")?;
    for e in events {
        writeln!(
            f,
            "{},{},{}",
            e.firm_id,
            panel.time_index()[e.event_time - 1],
            e.event.as_str()
        )?;
    }
    f.flush()
}

/// Checks that every panel firm has exactly one event record inside its
/// window, and returns the events reordered to panel firm order.
pub fn validate_events(panel: &FirmPanel, events: &[EventRecord]) -> Result<Vec<EventRecord>> {
    let tau = panel.n_months();
    let mut slots: Vec<Option<EventRecord>> = vec![None; panel.n_firms()];
    for e in events {
        let i = panel.firm_index(&e.firm_id).ok_or_else(|| {
            DataError::Validation(format!("event for firm `{}` has no panel rows", e.firm_id))
        })?;
        if e.event_time == 0 || e.event_time > tau {
            return Err(DataError::Validation(format!(
                "event time {} for firm `{}` is outside the panel range 1..={tau}",
                e.event_time, e.firm_id
            )));
        }
        if e.event_time - 1 < panel.windows()[i].first {
            return Err(DataError::Validation(format!(
                "event for firm `{}` precedes its first observation",
                e.firm_id
            )));
        }
        if slots[i].replace(e.clone()).is_some() {
            return Err(DataError::Validation(format!(
                "duplicate event record for firm `{}`",
                e.firm_id
            )));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                DataError::Validation(format!(
                    "firm `{}` has panel rows but no event record",
                    panel.firm_ids()[i]
                ))
            })
        })
        .collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| DataError::Io {
        file: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| DataError::Parse {
        file: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(DataError::Parse {
            file: path.display().to_string(),
            line: 1,
            message: format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn records(path: &Path, expected: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, expected)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            file: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_value(path: &Path, line: u64, s: &str, what: &str, allow_blank: bool) -> Result<f64> {
    if s.is_empty() {
        return if allow_blank {
            Ok(f64::NAN)
        } else {
            Err(parse_err(path, line, format!("{what} must not be blank")))
        };
    }
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{what} must be finite")));
    }
    Ok(v)
}

/// Reads `events.csv`, `firms.csv` and `macro.csv` into a validated panel and
/// the events in panel firm order.
pub fn load_panel(
    events_path: &Path,
    firm_path: &Path,
    macro_path: &Path,
) -> Result<(FirmPanel, Vec<EventRecord>)> {
    let mut macro_rows = Vec::new();
    for (line, rec) in records(macro_path, &["month", "r", "S"])? {
        let month: YearMonth = rec[0].parse().map_err(|e| parse_err(macro_path, line, e))?;
        let r = parse_value(macro_path, line, &rec[1], "r", false)?;
        let s = parse_value(macro_path, line, &rec[2], "S", false)?;
        macro_rows.push((line, month, r, s));
    }
    if macro_rows.is_empty() {
        return Err(DataError::Validation(format!(
            "{} has no rows",
            macro_path.display()
        )));
    }
    macro_rows.sort_by_key(|r| r.1);
    for w in macro_rows.windows(2) {
        if w[1].1 == w[0].1 {
            return Err(DataError::Validation(format!(
                "{}:{}: duplicate month {}",
                macro_path.display(),
                w[1].0,
                w[1].1
            )));
        }
        if w[1].1.ordinal() != w[0].1.ordinal() + 1 {
            return Err(DataError::Validation(format!(
                "{}: months {} and {} are not consecutive",
                macro_path.display(),
                w[0].1,
                w[1].1
            )));
        }
    }
    let time_index: Vec<YearMonth> = macro_rows.iter().map(|r| r.1).collect();
    let origin = time_index[0].ordinal();
    let tau = time_index.len();
    let month_idx = |m: YearMonth| -> Option<usize> {
        let k = m.ordinal() - origin;
        (0..tau as i64).contains(&k).then_some(k as usize)
    };

    let mut firm_ids: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<Vec<(usize, f64, f64)>> = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for (line, rec) in records(firm_path, &["firm_id", "month", "D", "V"])? {
        if rec[0].is_empty() {
            return Err(parse_err(firm_path, line, "firm_id must not be blank"));
        }
        let month: YearMonth = rec[1].parse().map_err(|e| parse_err(firm_path, line, e))?;
        let t = month_idx(month).ok_or_else(|| {
            DataError::Validation(format!(
                "{}:{line}: month {month} is outside the macro time index",
                firm_path.display()
            ))
        })?;
        let d = parse_value(firm_path, line, &rec[2], "D", true)?;
        let v = parse_value(firm_path, line, &rec[3], "V", true)?;
        let i = *lookup.entry(rec[0].clone()).or_insert_with(|| {
            firm_ids.push(rec[0].clone());
            cells.push(Vec::new());
            firm_ids.len() - 1
        });
        if !seen.insert((i, t)) {
            return Err(DataError::Validation(format!(
                "{}:{line}: duplicate row for firm `{}` in {month}",
                firm_path.display(),
                rec[0]
            )));
        }
        cells[i].push((t, d, v));
    }
    let n = firm_ids.len();
    let mut dgrid = Grid::missing(n, tau);
    let mut vgrid = Grid::missing(n, tau);
    let mut windows = Vec::with_capacity(n);
    for (i, rows) in cells.iter().enumerate() {
        let first = rows.iter().map(|r| r.0).min().unwrap_or(0);
        let last = rows.iter().map(|r| r.0).max().unwrap_or(0);
        for &(t, d, v) in rows {
            dgrid.set(i, t, d);
            vgrid.set(i, t, v);
        }
        windows.push(ObservationWindow { first, last });
    }
    let panel = FirmPanel::new(
        firm_ids,
        time_index,
        dgrid,
        vgrid,
        macro_rows.iter().map(|r| r.2).collect(),
        macro_rows.iter().map(|r| r.3).collect(),
        windows,
    )?;

    let mut events = Vec::new();
    for (line, rec) in records(events_path, &["firm_id", "event_month", "event_type"])? {
        let month: YearMonth = rec[1].parse().map_err(|e| parse_err(events_path, line, e))?;
        let event: EventType = rec[2].parse().map_err(|e| parse_err(events_path, line, e))?;
        let t = month_idx(month).ok_or_else(|| {
            DataError::Validation(format!(
                "{}:{line}: event_month {month} is outside the panel range",
                events_path.display()
            ))
        })?;
        events.push(EventRecord {
            firm_id: rec[0].clone(),
            event_time: t + 1,
            event,
        });
    }
    let events = validate_events(&panel, &events)?;
    Ok((panel, events))
}

/// Order-3 differences `X_t = L_{t+3} - L_t` of the stacked level panel,
/// with the anchor levels needed to invert them.
#[derive(Debug, Clone)]
pub struct DifferencedPanel {
    firm_ids: Vec<String>,
    time_index: Vec<YearMonth>,
    values: Grid,
    head_start: Vec<usize>,
    head_levels: Grid,
    tail_levels: Grid,
}

impl DifferencedPanel {
    pub fn n_firms(&self) -> usize {
        self.firm_ids.len()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.n_firms())
    }

    pub fn firm_ids(&self) -> &[String] {
        &self.firm_ids
    }

    /// Source panel time index (length `tau`).
    pub fn source_time_index(&self) -> &[YearMonth] {
        &self.time_index
    }

    /// `m x tau'` grid of differences.
    pub fn values(&self) -> &Grid {
        &self.values
    }

    /// Number of differenced periods, `tau' = tau - 3`.
    pub fn n_periods(&self) -> usize {
        self.values.cols()
    }

    /// Month index at which each series' level window starts.
    pub fn head_start(&self) -> &[usize] {
        &self.head_start
    }

    /// Source levels at the first three months of each series' window.
    pub fn head_levels(&self) -> &Grid {
        &self.head_levels
    }

    /// Carried-forward source levels at months `tau-3, tau-2, tau-1`.
    pub fn tail_levels(&self) -> &Grid {
        &self.tail_levels
    }

    pub fn series_name(&self, row: usize) -> String {
        let layout = self.layout();
        match layout.firm_of(row) {
            Some(i) if row < layout.n => format!("D[{}]", self.firm_ids[i]),
            Some(i) => format!("V[{}]", self.firm_ids[i]),
            None if row == layout.r() => "r".into(),
            None => "S".into(),
        }
    }

    /// Replaces the difference values, keeping the anchors. The new grid must
    /// have the same shape.
    pub fn with_values(&self, values: Grid) -> Result<DifferencedPanel> {
        if values.rows() != self.values.rows() || values.cols() != self.values.cols() {
            return Err(DataError::Validation("difference grid shape mismatch".into()));
        }
        Ok(DifferencedPanel {
            values,
            ..self.clone()
        })
    }

    /// Rebuilds the historical levels from the head anchors by
    /// `L_{t+3} = L_t + X_t`. Cells whose chain passes through a missing
    /// value stay missing.
    pub fn reconstruct_levels(&self) -> Grid {
        let m = self.values.rows();
        let tau = self.time_index.len();
        let mut out = Grid::missing(m, tau);
        for j in 0..m {
            let s = self.head_start[j];
            for k in 0..DIFF_LAG.min(tau.saturating_sub(s)) {
                out.set(j, s + k, self.head_levels.raw(j, k));
            }
            for t in s..self.n_periods() {
                let prev = out.raw(j, t);
                let d = self.values.raw(j, t);
                out.set(j, t + DIFF_LAG, prev + d);
            }
        }
        out
    }

    /// Future levels `L_{tau+h}` for each horizon step, from future
    /// differences `future[h]` (stacked m-vectors for period `tau' + h`).
    /// Series whose future differences are `NaN` are returned as `NaN`;
    /// a series with differences but incomplete tail levels is an error.
    pub fn invert_difference(&self, future: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = self.values.rows();
        let mut out = vec![vec![f64::NAN; m]; future.len()];
        let mut diffs = vec![0.0; future.len()];
        for j in 0..m {
            for (h, f) in future.iter().enumerate() {
                if f.len() != m {
                    return Err(DataError::Validation(format!(
                        "future difference vector {h} has length {}, expected {m}",
                        f.len()
                    )));
                }
                diffs[h] = f[j];
            }
            if diffs.iter().all(|d| d.is_nan()) {
                continue;
            }
            let tail = [
                self.tail_levels.raw(j, 0),
                self.tail_levels.raw(j, 1),
                self.tail_levels.raw(j, 2),
            ];
            let levels = extend_levels(tail, &diffs).map_err(|reason| DataError::Inversion {
                series: self.series_name(j),
                reason,
            })?;
            for (h, l) in levels.into_iter().enumerate() {
                out[h][j] = l;
            }
        }
        Ok(out)
    }
}

/// Continues a level series past its last three values `trailing` using
/// future order-3 differences: `L_{k+3} = L_k + X_k`.
pub fn extend_levels(trailing: [f64; 3], diffs: &[f64]) -> std::result::Result<Vec<f64>, String> {
    if trailing.iter().any(|v| !v.is_finite()) {
        return Err("fewer than 3 trailing levels available".into());
    }
    let mut buf: Vec<f64> = trailing.to_vec();
    buf.reserve(diffs.len());
    for (h, d) in diffs.iter().enumerate() {
        let next = buf[h] + d;
        buf.push(next);
    }
    Ok(buf.split_off(DIFF_LAG))
}

/// Order-3 seasonal difference of a level panel.
pub fn difference_order3(panel: &FirmPanel) -> Result<DifferencedPanel> {
    let tau = panel.n_months();
    if tau < DIFF_LAG + 1 {
        return Err(DataError::InsufficientHistory {
            needed: DIFF_LAG + 1,
            got: tau,
        });
    }
    let layout = panel.layout();
    let m = layout.m();
    let levels = panel.stacked_levels();
    let periods = tau - DIFF_LAG;
    let mut values = Grid::missing(m, periods);
    let mut head_levels = Grid::missing(m, DIFF_LAG);
    let mut tail_levels = Grid::missing(m, DIFF_LAG);
    let mut head_start = vec![0; m];
    for j in 0..m {
        let row = levels.row(j);
        let out = values.row_mut(j);
        for t in 0..periods {
            out[t] = row[t + DIFF_LAG] - row[t];
        }
        let window = layout.firm_of(j).map(|i| panel.windows()[i]);
        let start = window.map_or(0, |w| w.first);
        head_start[j] = start;
        for k in 0..DIFF_LAG {
            if start + k < tau {
                head_levels.set(j, k, row[start + k]);
            }
        }
        for k in 0..DIFF_LAG {
            let t = tau - DIFF_LAG + k;
            if let Some(v) = carry_back(row, start, t, CARRY_FORWARD_CAP) {
                tail_levels.set(j, k, v);
            }
        }
    }
    Ok(DifferencedPanel {
        firm_ids: panel.firm_ids().to_vec(),
        time_index: panel.time_index().to_vec(),
        values,
        head_start,
        head_levels,
        tail_levels,
    })
}
