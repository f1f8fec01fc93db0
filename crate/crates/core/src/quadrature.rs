//! Gauss–Legendre rules and the adaptive composite integrator used for all
//! schedule integrals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn on_interval(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (mid + half * x, half * w))
            .collect()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut s = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(mid + half * x);
        }
        s * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { p0 } else { p1 };
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p, dp)
}

/// Settings for the adaptive composite Gauss–Legendre integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Initial number of equal panels on each smooth piece.
    pub panels: usize,
    /// Gauss–Legendre order per panel.
    pub order: usize,
    /// Scan resolution for locating kinks (sign changes of derivatives).
    pub scan_points: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Maximum number of bisections of an initial panel.
    pub max_depth: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            panels: 256,
            order: 10,
            scan_points: 4096,
            abs_tol: 1e-14,
            rel_tol: 1e-13,
            max_depth: 40,
        }
    }
}

/// Integrates `f` over `[a, b]` after splitting at `breaks`.
///
/// Each piece is cut into `spec.panels` panels; a panel is accepted when the
/// rule on the whole panel agrees with the rule on its two halves, otherwise
/// it is bisected recursively.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    spec: &QuadratureSpec,
) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::Domain(format!("invalid interval [{a}, {b}]")));
    }
    if b == a {
        return Ok(0.0);
    }
    let rule = GaussLegendre::new(spec.order.max(2));
    let mut cuts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&x| x > a && x < b))
        .chain(std::iter::once(b))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let total_len = b - a;
    let mut total = 0.0;
    let mut excess_sum = 0.0;
    for piece in cuts.windows(2) {
        let (lo, hi) = (piece[0], piece[1]);
        let panels = spec.panels.max(1);
        let width = (hi - lo) / panels as f64;
        for p in 0..panels {
            let pa = lo + p as f64 * width;
            let pb = if p + 1 == panels { hi } else { pa + width };
            let coarse = rule.integrate(&f, pa, pb);
            let (value, excess) = refine(&f, &rule, pa, pb, coarse, spec, total_len, 0);
            total += value;
            excess_sum += excess;
        }
    }
    // panels that stopped refining are fine as long as their combined
    // error estimate stays within the global tolerance
    let requested = spec.abs_tol.max(spec.rel_tol * total.abs());
    if excess_sum > requested {
        return Err(Error::Quadrature {
            achieved: excess_sum,
            requested,
        });
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    whole: f64,
    spec: &QuadratureSpec,
    total_len: f64,
    depth: usize,
) -> (f64, f64) {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(f, a, mid);
    let right = rule.integrate(f, mid, b);
    let halves = left + right;
    let diff = (halves - whole).abs();
    let share = (b - a) / total_len;
    let tol = (spec.abs_tol * share).max(spec.rel_tol * halves.abs());
    if diff <= tol {
        return (halves, 0.0);
    }
    if depth >= spec.max_depth || b - a <= f64::EPSILON * (1.0 + a.abs()) * 8.0 {
        return (halves, diff);
    }
    let (l, el) = refine(f, rule, a, mid, left, spec, total_len, depth + 1);
    let (r, er) = refine(f, rule, mid, b, right, spec, total_len, depth + 1);
    (l + r, el + er)
}

/// Locates sign changes of `g` on `[a, b]`: scan at `scan_points` equal
/// steps, then bisect each bracket to machine precision.
pub fn sign_changes<G: Fn(f64) -> f64>(g: G, a: f64, b: f64, scan_points: usize) -> Vec<f64> {
    let n = scan_points.max(2);
    let mut roots = Vec::new();
    let mut prev_t = a;
    let mut prev = g(a);
    for k in 1..=n {
        let t = a + (b - a) * k as f64 / n as f64;
        let cur = g(t);
        if cur == 0.0 && k < n {
            roots.push(t);
        } else if prev != 0.0 && cur != 0.0 && (prev < 0.0) != (cur < 0.0) {
            let (mut lo, mut hi) = (prev_t, t);
            let lo_neg = prev < 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let gm = g(mid);
                if gm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (gm < 0.0) == lo_neg {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_t = t;
        prev = cur;
    }
    roots
}

/// Composite Gauss–Legendre nodes on [a, b] (`panels` × `order`).
pub fn composite_nodes(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(order);
    let width = (b - a) / panels as f64;
    (0..panels)
        .flat_map(|p| {
            let pa = a + p as f64 * width;
            rule.on_interval(pa, pa + width)
        })
        .collect()
}
