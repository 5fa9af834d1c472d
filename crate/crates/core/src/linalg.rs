//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, Dyn};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n
}

/// Cholesky factorisation, retried with a growing ridge of
/// `1e-8 * mean|diag|` (times 10 per retry) when the plain factorisation
/// fails. Returns the factor and the ridge that was added.
pub fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Some((c, 0.0));
    }
    let base = {
        let md = mean_diagonal(&sym);
        if md > 0.0 && md.is_finite() {
            md
        } else {
            1.0
        }
    };
    let mut ridge = 1e-8 * base;
    for _ in 0..8 {
        let mut r = sym.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(r) {
            return Some((c, ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Inverse of a symmetric positive (semi)definite matrix via ridge-repaired
/// Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_with_ridge(m).map(|(c, _)| symmetrize(&c.inverse()))
}

/// Symmetric square-root factor `L` with `L L^T = m` for a PSD matrix.
/// Eigenvalues below `-tol * max(1, max|eig|)` make the matrix unrepairable;
/// smaller negative eigenvalues are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if m.iter().all(|v| *v == 0.0) {
        return Some(DMatrix::zeros(n, n));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol * scale || !lambda.is_finite() {
            return None;
        }
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Some(factor)
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves the discrete Lyapunov equation `S = A S A^T + Q` through the
/// Kronecker-vectorised linear system. Returns `None` when `A` has a unit
/// root (the system is singular).
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(k * k, k * k) - kron;
    let rhs = nalgebra::DVector::from_iterator(k * k, q.iter().copied());
    let sol = lhs.lu().solve(&rhs)?;
    Some(symmetrize(&DMatrix::from_iterator(k, k, sol.iter().copied())))
}
