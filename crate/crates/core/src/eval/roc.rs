//! Power curves and the area under the ROC curve.

use std::io::Write;
use std::path::Path;

use super::{EvalError, Result};

/// Ranking performance of a score against default outcomes. Points are
/// cumulative after each distinct score, from the highest down, starting at
/// the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Distinct scores in decreasing order (one per point after the origin).
    pub thresholds: Vec<f64>,
    pub true_positive: Vec<f64>,
    pub false_positive: Vec<f64>,
    /// Fraction of all firms ranked at or above each threshold.
    pub percentile: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// Area under `(false_positive, true_positive)` by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.false_positive
            .windows(2)
            .zip(self.true_positive.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
            .sum()
    }
}

fn counts(outcomes: &[bool]) -> Result<(usize, usize)> {
    let positives = outcomes.iter().filter(|&&o| o).count();
    let negatives = outcomes.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::UndefinedAuc { positives, negatives });
    }
    Ok((positives, negatives))
}

fn check_scores(scores: &[f64], outcomes: &[bool]) -> Result<()> {
    if scores.len() != outcomes.len() {
        return Err(EvalError::Domain(format!(
            "{} scores for {} outcomes",
            scores.len(),
            outcomes.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Domain("scores must not be NaN".into()));
    }
    Ok(())
}

/// Curve of cumulative default capture as firms are taken in decreasing
/// score order. Tied scores enter together, which averages their
/// contribution to the AUC.
pub fn power_curve(scores: &[f64], outcomes: &[bool]) -> Result<RocCurve> {
    check_scores(scores, outcomes)?;
    let (pos, neg) = counts(outcomes)?;
    let total = scores.len() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = RocCurve {
        thresholds: Vec::new(),
        true_positive: vec![0.0],
        false_positive: vec![0.0],
        percentile: vec![0.0],
        auc: 0.0,
    };
    // twice the concordance numerator, kept in integers
    let mut twice_concordant: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while k < order.len() && scores[order[k]] == s {
            if outcomes[order[k]] {
                gp += 1;
            } else {
                gn += 1;
            }
            k += 1;
        }
        twice_concordant += gn as u128 * (2 * tp + gp) as u128;
        tp += gp;
        fp += gn;
        curve.thresholds.push(s);
        curve.true_positive.push(tp as f64 / pos as f64);
        curve.false_positive.push(fp as f64 / neg as f64);
        curve.percentile.push((tp + fp) as f64 / total);
    }
    curve.auc = twice_concordant as f64 / (2 * pos * neg) as f64;
    Ok(curve)
}

/// AUC as the share of (default, non-default) pairs ranked correctly,
/// counting ties as one half.
pub fn auc_by_concordance(scores: &[f64], outcomes: &[bool]) -> Result<f64> {
    check_scores(scores, outcomes)?;
    let (pos, neg) = counts(outcomes)?;
    let mut twice: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !outcomes[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if outcomes[j] {
                continue;
            }
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Writes the power curve as `percentile,tpr`.
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "percentile,tpr")?;
    for (p, t) in curve.percentile.iter().zip(&curve.true_positive) {
        writeln!(f, "{p},{t}")?;
    }
    f.flush()
}
