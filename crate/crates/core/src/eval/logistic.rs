//! Logistic regression of realised defaults on the point prediction, the
//! interval width and their product, fitted by iteratively reweighted least
//! squares.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{EvalError, Result};
use crate::data::CsvFloat;

const MAX_IRLS: usize = 100;
/// Coefficient magnitude taken as a sign of (quasi-)separation.
const SEPARATION_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticTerm {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub terms: Vec<LogisticTerm>,
    pub null_deviance: f64,
    pub residual_deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coefficients diverged; estimates are those at the iteration cap.
    pub separation: bool,
}

fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        if yi > 0.0 {
            d -= 2.0 * yi * mi.ln();
        }
        if yi < 1.0 {
            d -= 2.0 * (1.0 - yi) * (1.0 - mi).ln();
        }
    }
    d
}

fn sigmoid(x: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    p.clamp(1e-15, 1.0 - 1e-15)
}

/// Fits `logit P(y = 1) = X beta`. Columns of `x` that are identically zero
/// are dropped (column 0 is assumed to be the intercept and always kept).
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], names: &[&str]) -> Result<LogisticFit> {
    let n = x.nrows();
    if n != y.len() || names.len() != x.ncols() {
        return Err(EvalError::Domain("design, response and term names disagree in size".into()));
    }
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(EvalError::Domain("responses must lie in [0, 1]".into()));
    }
    let keep: Vec<usize> = (0..x.ncols())
        .filter(|&c| c == 0 || x.column(c).iter().any(|&v| v != 0.0))
        .collect();
    let x = x.select_columns(&keep);
    let p = x.ncols();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let null_mu = vec![ybar.clamp(1e-15, 1.0 - 1e-15); n];
    let null_deviance = deviance(y, &null_mu);

    let mut beta = DVector::zeros(p);
    beta[0] = (ybar.clamp(1e-6, 1.0 - 1e-6) / (1.0 - ybar.clamp(1e-6, 1.0 - 1e-6))).ln();
    let mut dev_old = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    while iterations < MAX_IRLS {
        iterations += 1;
        let eta = &x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / w[i]).collect();
        let mut xtw = x.transpose();
        for (i, mut col) in xtw.column_iter_mut().enumerate() {
            col *= w[i];
        }
        info = &xtw * &x;
        let rhs = &xtw * DVector::from_vec(z);
        let chol = nalgebra::Cholesky::new(info.clone()).ok_or(EvalError::RankDeficient)?;
        beta = chol.solve(&rhs);
        let mu_new: Vec<f64> = (&x * &beta).iter().map(|&e| sigmoid(e)).collect();
        let dev = deviance(y, &mu_new);
        if (dev - dev_old).abs() < 1e-10 * (dev.abs() + 0.1) {
            converged = true;
            break;
        }
        dev_old = dev;
    }
    let eta = &x * &beta;
    let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let mut xtw = x.transpose();
    for (i, mut col) in xtw.column_iter_mut().enumerate() {
        col *= mu[i] * (1.0 - mu[i]);
    }
    let refreshed = &xtw * &x;
    if nalgebra::Cholesky::new(refreshed.clone()).is_some() {
        info = refreshed;
    }
    let cov = nalgebra::Cholesky::new(info)
        .ok_or(EvalError::RankDeficient)?
        .inverse();
    let separation = beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) || !converged;
    if separation {
        log::warn!("logistic fit shows signs of separation; coefficients may diverge");
    }
    let normal = Normal::standard();
    let terms = keep
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let se = cov[(k, k)].max(0.0).sqrt();
            let z = beta[k] / se;
            LogisticTerm {
                name: names[c].to_string(),
                estimate: beta[k],
                std_error: se,
                z_value: z,
                p_value: 2.0 * (1.0 - normal.cdf(z.abs())),
            }
        })
        .collect();
    Ok(LogisticFit {
        terms,
        null_deviance,
        residual_deviance: deviance(y, &mu),
        iterations,
        converged,
        separation,
    })
}

/// Regression of default flags on interval width, point prediction and
/// their interaction.
pub fn logistic_interaction(defaults: &[bool], points: &[f64], widths: &[f64]) -> Result<LogisticFit> {
    let n = defaults.len();
    if points.len() != n || widths.len() != n {
        return Err(EvalError::Domain("inputs must have equal length".into()));
    }
    let x = DMatrix::from_fn(n, 4, |i, c| match c {
        0 => 1.0,
        1 => widths[i],
        2 => points[i],
        _ => widths[i] * points[i],
    });
    let y: Vec<f64> = defaults.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    fit_logistic(
        &x,
        &y,
        &["Intercept", "PI width", "Point prediction", "PI width x Point prediction"],
    )
}

/// Coefficient table with the columns `Estimate, Std. Error, z value,
/// Pr(>|z|)`, followed by the deviances.
pub fn write_logistic_csv(path: &Path, fit: &LogisticFit) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "term,Estimate,Std. Error,z value,Pr(>|z|)")?;
    for t in &fit.terms {
        writeln!(
            f,
            "{},{},{},{},{}",
            t.name,
            CsvFloat(t.estimate),
            CsvFloat(t.std_error),
            CsvFloat(t.z_value),
            CsvFloat(t.p_value)
        )?;
    }
    writeln!(f, "null deviance,{},,,", fit.null_deviance)?;
    writeln!(f, "residual deviance,{},,,", fit.residual_deviance)?;
    f.flush()
}
