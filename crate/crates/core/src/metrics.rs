//! Empirical 2-Wasserstein distances, the same-start coupling bound and
//! operator norms.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest problem solved by exact assignment.
pub const EXACT_ASSIGNMENT_CAP: usize = 4096;
const SVD_CAP: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportMethod {
    #[default]
    /// Quantile coupling for `d = 1`, exact assignment up to the cap, Sinkhorn beyond.
    Auto,
    ExactAssignment,
    /// Entropic transport with `reg = reg_scale · median pairwise cost`.
    Sinkhorn { reg_scale: f64 },
    Quantile1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub w2: f64,
    /// `exact-assignment`, `sinkhorn` or `1d-quantile`.
    pub method: String,
    /// Absolute entropic regularisation when Sinkhorn was used.
    pub reg: Option<f64>,
    pub n: usize,
    /// Present whenever the value carries entropic bias.
    pub caveat: Option<String>,
    #[serde(skip)]
    pub runtime: Duration,
}

fn check_sets(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("point sets must be non-empty".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::InvalidInput("points have inconsistent dimensions".into()));
    }
    Ok(d)
}

/// Empirical W2 between two equally weighted point clouds.
pub fn w2_empirical(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    method: TransportMethod,
) -> Result<TransportResult> {
    let d = check_sets(a, b)?;
    let start = Instant::now();
    let method = match method {
        TransportMethod::Auto if d == 1 && a.len() == b.len() => TransportMethod::Quantile1d,
        TransportMethod::Auto if a.len() == b.len() && a.len() <= EXACT_ASSIGNMENT_CAP => {
            TransportMethod::ExactAssignment
        }
        TransportMethod::Auto => TransportMethod::Sinkhorn { reg_scale: 0.01 },
        m => m,
    };
    let mut result = match method {
        TransportMethod::Quantile1d => {
            if d != 1 {
                return Err(Error::InvalidInput("1d-quantile method needs d = 1".into()));
            }
            if a.len() != b.len() {
                return Err(size_mismatch(a.len(), b.len()));
            }
            let mut x: Vec<f64> = a.iter().map(|p| p[0]).collect();
            let mut y: Vec<f64> = b.iter().map(|p| p[0]).collect();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            let ms = x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / x.len() as f64;
            TransportResult {
                w2: ms.sqrt(),
                method: "1d-quantile".into(),
                reg: None,
                n: x.len(),
                caveat: None,
                runtime: Duration::ZERO,
            }
        }
        TransportMethod::ExactAssignment => {
            if a.len() != b.len() {
                return Err(size_mismatch(a.len(), b.len()));
            }
            if a.len() > EXACT_ASSIGNMENT_CAP {
                return Err(Error::SizeLimit {
                    what: "exact assignment",
                    size: a.len(),
                    cap: EXACT_ASSIGNMENT_CAP,
                    hint: " (use the sinkhorn method)",
                });
            }
            let cost = cost_matrix(a, b);
            let n = a.len();
            let assignment = solve_assignment(&cost, n);
            let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            TransportResult {
                w2: (total / n as f64).max(0.0).sqrt(),
                method: "exact-assignment".into(),
                reg: None,
                n,
                caveat: None,
                runtime: Duration::ZERO,
            }
        }
        TransportMethod::Sinkhorn { reg_scale } => {
            if !(reg_scale > 0.0) {
                return Err(Error::InvalidInput("sinkhorn reg_scale must be positive".into()));
            }
            let cost = cost_matrix(a, b);
            let reg = reg_scale * median(&cost).max(1e-300);
            let (value, iters) = sinkhorn_cost(&cost, a.len(), b.len(), reg, 10_000, 1e-9);
            TransportResult {
                w2: value.max(0.0).sqrt(),
                method: "sinkhorn".into(),
                reg: Some(reg),
                n: a.len().max(b.len()),
                caveat: Some(format!(
                    "entropic plan cost after {iters} iterations; overestimates squared W2 by at most about reg*log(n) = {:.3e}",
                    reg * (a.len().max(b.len()) as f64).ln()
                )),
                runtime: Duration::ZERO,
            }
        }
        TransportMethod::Auto => unreachable!("auto resolved above"),
    };
    result.runtime = start.elapsed();
    Ok(result)
}

fn size_mismatch(a: usize, b: usize) -> Error {
    Error::InvalidInput(format!("point sets have different sizes {a} and {b}"))
}

/// Row-major squared-Euclidean cost matrix.
fn cost_matrix(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<f64> {
    a.par_iter()
        .flat_map_iter(|p| b.iter().map(move |q| (p - q).norm_squared()))
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    let mid = s.len() / 2;
    let (_, m, _) = s.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Optimal assignment for a square cost matrix by shortest augmenting paths
/// with dual potentials. Returns the column assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        out[row_of[j] - 1] = j - 1;
    }
    out
}

/// Log-domain Sinkhorn with uniform marginals. Returns the transport cost of
/// the entropic plan and the number of iterations used.
fn sinkhorn_cost(cost: &[f64], n: usize, m: usize, reg: f64, max_iter: usize, tol: f64) -> (f64, usize) {
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut iters = 0;
    for it in 0..max_iter {
        iters = it + 1;
        f = (0..n)
            .into_par_iter()
            .map(|i| -reg * lse(&mut (0..m).map(|j| (g[j] - cost[i * m + j]) / reg + log_b)))
            .collect();
        g = (0..m)
            .into_par_iter()
            .map(|j| -reg * lse(&mut (0..n).map(|i| (f[i] - cost[i * m + j]) / reg + log_a)))
            .collect();
        // after the g update columns are exact; measure row marginal error
        let err: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let s: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[i * m + j]) / reg + log_a + log_b).exp())
                    .sum();
                (s - 1.0 / n as f64).abs()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        if err < tol {
            break;
        }
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let c = cost[i * m + j];
                    ((f[i] + g[j] - c) / reg + log_a + log_b).exp() * c
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    (total, iters)
}

/// `sqrt(mean_i ‖y_i − z_i‖²)` for index-aligned endpoints.
pub fn coupled_w2_upper(y_end: &[DVector<f64>], z_end: &[DVector<f64>]) -> Result<f64> {
    if y_end.len() != z_end.len() {
        return Err(size_mismatch(y_end.len(), z_end.len()));
    }
    if y_end.is_empty() {
        return Err(Error::InvalidInput("point sets must be non-empty".into()));
    }
    let ms = y_end
        .iter()
        .zip(z_end)
        .map(|(y, z)| (y - z).norm_squared())
        .sum::<f64>()
        / y_end.len() as f64;
    Ok(ms.sqrt())
}

/// Largest singular value: SVD for `d ≤ 64`, power iteration on `mᵀm` beyond.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows().max(m.ncols()) <= SVD_CAP {
        m.clone()
            .singular_values()
            .iter()
            .fold(0.0, |acc: f64, s| acc.max(*s))
    } else {
        crate::linalg::power_iteration(&(m.transpose() * m), 1e-12, 100_000).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use nalgebra::dvector;
    use rand::Rng;

    fn pts1(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|&x| dvector![x]).collect()
    }

    #[test]
    fn crossing_pair_has_zero_cost() {
        let a = pts1(&[0.0, 1.0]);
        let b = pts1(&[1.0, 0.0]);
        let r = w2_empirical(&a, &b, TransportMethod::ExactAssignment).unwrap();
        assert_eq!(r.w2, 0.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = stream(5, 0);
        for n in 1..=6 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let sol = solve_assignment(&cost, n);
            let got: f64 = sol.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permutations(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                best = best.min(c);
            });
            assert!((got - best).abs() < 1e-12, "n={n}: {got} vs {best}");
        }
    }

    fn permutations(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permutations(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn quantile_translation() {
        let a = pts1(&[-1.2, 0.3, 0.0, 2.5]);
        let b: Vec<_> = a.iter().map(|p| p.add_scalar(0.7)).collect();
        let r = w2_empirical(&a, &b, TransportMethod::Quantile1d).unwrap();
        assert!((r.w2 - 0.7).abs() < 1e-10);
    }

    #[test]
    fn sinkhorn_is_close_to_exact_and_flags_bias() {
        let mut rng = stream(9, 0);
        let a: Vec<_> = (0..60).map(|_| dvector![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let b: Vec<_> = (0..60).map(|_| dvector![rng.random::<f64>() + 0.5, rng.random::<f64>()]).collect();
        let e = w2_empirical(&a, &b, TransportMethod::ExactAssignment).unwrap();
        let s = w2_empirical(&a, &b, TransportMethod::Sinkhorn { reg_scale: 0.01 }).unwrap();
        assert!(s.caveat.is_some());
        let bias = s.reg.unwrap() * (60f64).ln();
        assert!(s.w2 * s.w2 >= e.w2 * e.w2 - 1e-9);
        assert!(s.w2 * s.w2 <= e.w2 * e.w2 + bias + 1e-6);
    }

    #[test]
    fn exact_over_cap_suggests_sinkhorn() {
        let a = pts1(&vec![0.0; EXACT_ASSIGNMENT_CAP + 1]);
        let err = w2_empirical(&a, &a, TransportMethod::ExactAssignment).unwrap_err();
        assert!(err.to_string().contains("sinkhorn"));
    }

    #[test]
    fn coupled_bound_shift() {
        let y = vec![dvector![0.0, 0.0], dvector![1.0, 2.0]];
        let z: Vec<_> = y.iter().map(|p| p + dvector![3.0, 4.0]).collect();
        assert!((coupled_w2_upper(&y, &z).unwrap() - 5.0).abs() < 1e-14);
        assert!(coupled_w2_upper(&y, &z[..1]).is_err());
    }

    #[test]
    fn operator_norms() {
        assert!((operator_norm(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-14);
        let m = DMatrix::from_diagonal(&dvector![3.0, -4.0]);
        assert!((operator_norm(&m) - 4.0).abs() < 1e-14);
    }
}
