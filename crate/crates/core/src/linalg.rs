//! Small dense helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};

/// Largest eigenvalue in magnitude of a symmetric matrix.
///
/// Full symmetric eigendecomposition up to `dense_cap`, power iteration
/// (tolerance `1e-10`) beyond.
pub fn symmetric_spectral_norm(m: &DMatrix<f64>, dense_cap: usize) -> f64 {
    if m.nrows() <= dense_cap {
        m.clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0, |acc: f64, e| acc.max(e.abs()))
    } else {
        power_iteration(m, 1e-10, 10_000)
    }
}

/// Dominant |eigenvalue| of a symmetric matrix by power iteration.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // deterministic start with no special alignment
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= tol * next.max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Linear least-squares slope and intercept of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}
