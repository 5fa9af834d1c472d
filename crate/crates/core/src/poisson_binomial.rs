//! Exact law of a sum of independent, non-identical Bernoulli variables.
//!
//! The CDF is evaluated by inverting the characteristic function on the
//! `n' + 1` roots of unity:
//!
//! `F(k) = (n'+1)^-1 sum_l [(1 - e^{-i w l (k+1)}) / (1 - e^{-i w l})] prod_i (1 - p_i + p_i e^{i w l})`
//!
//! with `w = 2 pi / (n'+1)`. The product is accumulated as a sum of
//! log-moduli and phases so that it does not underflow for thousands of
//! firms.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

/// Largest imaginary residue tolerated in a CDF value.
pub const IMAG_TOL: f64 = 1e-9;
/// Slack for comparing CDF values against quantile targets.
const QUANTILE_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PoissonBinomialError {
    #[error("probability {value} at position {index} is outside [0, 1]")]
    Probability { index: usize, value: f64 },
    #[error("alpha {0} must lie in (0, 1)")]
    Alpha(f64),
    #[error("CDF at count {count} has imaginary part {imag:.3e}")]
    ImaginaryResidue { count: usize, imag: f64 },
    #[error("CDF at count {count} evaluates to {value}, outside [0, 1]")]
    OutOfRange { count: usize, value: f64 },
}

impl PoissonBinomialError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PoissonBinomialError::ImaginaryResidue { .. } | PoissonBinomialError::OutOfRange { .. }
        )
    }
}

type Result<T> = std::result::Result<T, PoissonBinomialError>;

fn check_probabilities(p: &[f64]) -> Result<()> {
    for (index, &value) in p.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(PoissonBinomialError::Probability { index, value });
        }
    }
    Ok(())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PoissonBinomialError::Alpha(alpha))
    }
}

/// Distribution of the count over `0..=n'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDistribution {
    probabilities: Vec<f64>,
    cdf: Vec<f64>,
    max_imag: f64,
}

impl CountDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// `F(k)` for `k = 0..=n'`.
    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Largest imaginary residue seen while inverting the transform.
    pub fn max_imaginary(&self) -> f64 {
        self.max_imag
    }

    pub fn pmf(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|&f| {
                let v = f - prev;
                prev = f;
                v
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.pmf().iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// Smallest count `k` with `F(k) >= target` (left inverse of the CDF).
    pub fn quantile(&self, target: f64) -> usize {
        self.cdf
            .iter()
            .position(|&f| f >= target - QUANTILE_SLACK)
            .unwrap_or(self.cdf.len() - 1)
    }

    /// Plug-in interval `(F^-1(alpha/2), F^-1(1 - alpha/2))`.
    pub fn interval(&self, alpha: f64) -> Result<(usize, usize)> {
        check_alpha(alpha)?;
        Ok((self.quantile(alpha / 2.0), self.quantile(1.0 - alpha / 2.0)))
    }
}

/// Exact CDF of the count via the discrete Fourier inversion above.
pub fn pb_cdf(p: &[f64]) -> Result<CountDistribution> {
    check_probabilities(p)?;
    let n = p.len();
    let size = n + 1;
    let omega = std::f64::consts::TAU / size as f64;
    // twiddle[j] = e^{-i w j}, reduced modulo n'+1 for accuracy
    let twiddle: Vec<Complex64> = (0..size)
        .map(|j| Complex64::from_polar(1.0, -omega * j as f64))
        .collect();

    let products: Vec<Complex64> = (0..size)
        .into_par_iter()
        .map(|l| {
            if l == 0 {
                return Complex64::new(1.0, 0.0);
            }
            let (s, c) = (omega * l as f64).sin_cos();
            let mut log_mod = 0.0;
            let mut phase = 0.0;
            for &pi in p {
                let z = Complex64::new(1.0 - pi + pi * c, pi * s);
                let r = z.norm();
                if r == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                log_mod += r.ln();
                phase += z.im.atan2(z.re);
            }
            Complex64::from_polar(log_mod.exp(), phase)
        })
        .collect();

    let terms: Vec<Complex64> = (0..size)
        .into_par_iter()
        .map(|k| {
            let mut acc = products[0] * (k as f64 + 1.0);
            for l in 1..size {
                let numer = Complex64::new(1.0, 0.0) - twiddle[(l * (k + 1)) % size];
                let denom = Complex64::new(1.0, 0.0) - twiddle[l];
                acc += numer / denom * products[l];
            }
            acc / size as f64
        })
        .collect();

    let mut cdf = Vec::with_capacity(size);
    let mut max_imag: f64 = 0.0;
    let mut running: f64 = 0.0;
    for (count, z) in terms.into_iter().enumerate() {
        max_imag = max_imag.max(z.im.abs());
        if z.im.abs() >= IMAG_TOL {
            return Err(PoissonBinomialError::ImaginaryResidue { count, imag: z.im });
        }
        if !(-IMAG_TOL..=1.0 + IMAG_TOL).contains(&z.re) {
            return Err(PoissonBinomialError::OutOfRange { count, value: z.re });
        }
        running = running.max(z.re.clamp(0.0, 1.0));
        cdf.push(running);
    }
    Ok(CountDistribution {
        probabilities: p.to_vec(),
        cdf,
        max_imag,
    })
}

/// Naive (plug-in) prediction interval for the count at level `1 - alpha`.
pub fn naive_pi(p: &[f64], alpha: f64) -> Result<(usize, usize)> {
    check_alpha(alpha)?;
    pb_cdf(p)?.interval(alpha)
}

/// One draw of the count as a sum of independent Bernoulli variables.
pub fn sample_count<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<usize> {
    check_probabilities(p)?;
    Ok(p.iter().filter(|&&pi| rng.random::<f64>() < pi).count())
}

/// Joint draw of cumulative counts over several horizons. `p[i][h]` is firm
/// `i`'s cumulative default probability by horizon `h` (non-decreasing in
/// `h`). One uniform per firm drives all horizons, so each horizon's count
/// has its exact Poisson-binomial law and counts are non-decreasing.
pub fn sample_nested_counts<R: Rng + ?Sized>(p: &[Vec<f64>], n_horizons: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_horizons];
    for (i, row) in p.iter().enumerate() {
        if row.len() != n_horizons {
            return Err(PoissonBinomialError::Probability {
                index: i,
                value: f64::NAN,
            });
        }
        check_probabilities(row)?;
        let u: f64 = rng.random();
        for (c, &ph) in counts.iter_mut().zip(row) {
            if u < ph {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Normal approximation `P(N <= k)` with continuity correction.
pub fn normal_approx_cdf(p: &[f64], k: usize) -> Result<f64> {
    check_probabilities(p)?;
    let mu: f64 = p.iter().sum();
    let var: f64 = p.iter().map(|q| q * (1.0 - q)).sum();
    if var == 0.0 {
        return Ok(if k as f64 >= mu { 1.0 } else { 0.0 });
    }
    let z = (k as f64 + 0.5 - mu) / var.sqrt();
    Ok(Normal::standard().cdf(z))
}

/// Skewness-corrected normal approximation
/// `Phi(x) + gamma (1 - x^2) phi(x) / 6`, clamped to `[0, 1]`.
pub fn refined_normal_cdf(p: &[f64], k: usize) -> Result<f64> {
    check_probabilities(p)?;
    let mu: f64 = p.iter().sum();
    let var: f64 = p.iter().map(|q| q * (1.0 - q)).sum();
    if var == 0.0 {
        return Ok(if k as f64 >= mu { 1.0 } else { 0.0 });
    }
    let sd = var.sqrt();
    let third: f64 = p.iter().map(|q| q * (1.0 - q) * (1.0 - 2.0 * q)).sum();
    let gamma = third / (sd * sd * sd);
    let x = (k as f64 + 0.5 - mu) / sd;
    let n = Normal::standard();
    Ok((n.cdf(x) + gamma * (1.0 - x * x) * n.pdf(x) / 6.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSchedule;

    #[test]
    fn fair_coins() {
        let d = pb_cdf(&[0.5, 0.5]).unwrap();
        for (got, want) in d.cdf().iter().zip([0.25, 0.75, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_count_probability() {
        let d = pb_cdf(&[0.1, 0.2, 0.3]).unwrap();
        assert!((d.cdf()[0] - 0.504).abs() < 1e-12);
    }

    #[test]
    fn empty_and_degenerate_vectors() {
        assert_eq!(pb_cdf(&[]).unwrap().cdf(), &[1.0]);
        assert_eq!(naive_pi(&[0.0; 7], 0.1).unwrap(), (0, 0));
        let d = pb_cdf(&[1.0; 4]).unwrap();
        assert!(d.cdf()[3] < 1e-12 && (d.cdf()[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_quantiles() {
        assert_eq!(naive_pi(&[0.5; 20], 0.10).unwrap(), (6, 14));
        assert_eq!(naive_pi(&[0.5; 20], 0.9999).unwrap(), (10, 10));
    }

    #[test]
    fn domain_errors() {
        assert!(pb_cdf(&[0.5, 1.2]).is_err());
        assert!(pb_cdf(&[-0.1]).is_err());
        assert!(naive_pi(&[0.5], 0.0).is_err());
        assert!(naive_pi(&[0.5], 1.0).is_err());
    }

    #[test]
    fn sampler_extremes() {
        let mut rng = SeedSchedule::new(1).stream(&[0]);
        assert_eq!(sample_count(&[1.0; 9], &mut rng).unwrap(), 9);
        assert_eq!(sample_count(&[0.0; 9], &mut rng).unwrap(), 0);
    }

    #[test]
    fn approximations_track_exact_cdf() {
        let p: Vec<f64> = (0..400).map(|i| 0.02 + 0.1 * ((i * 37 % 100) as f64 / 100.0)).collect();
        let d = pb_cdf(&p).unwrap();
        for k in [30, 40, 45, 50, 60] {
            let exact = d.cdf()[k];
            let plain = normal_approx_cdf(&p, k).unwrap();
            let refined = refined_normal_cdf(&p, k).unwrap();
            assert!((plain - exact).abs() < 0.02, "k={k}");
            assert!((refined - exact).abs() <= (plain - exact).abs() + 2e-3, "k={k}");
        }
    }
}
