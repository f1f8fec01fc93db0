//! λ-regularity of mixtures: the posterior covariance of added Gaussian noise.
//!
//! For `W' = W + ξ` with `ξ ~ N(0, τ² I)`, a random variable is λ-regular when
//! `‖cov(ξ | W' = x)‖_op ≤ λ τ²` for every `τ > 0` and every `x`. For Gaussian
//! mixtures the posterior of ξ is itself a mixture, so the covariance is exact:
//! per-component Gaussian conditioning combined by the law of total covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_spectral_norm, symmetrize};
use crate::mixtures::{Covariance, GaussianMixture, COVARIANCE_RIDGE};
use crate::rng::Stream;
use crate::schedules::Schedule;

/// Dimension above which operator norms switch to power iteration.
const DENSE_EIGEN_CAP: usize = 16;
const MAX_CONVOLVED_COMPONENTS: usize = 10_000;

/// Exact `cov(ξ | W + ξ = x)` for `ξ ~ N(0, τ² I)`.
pub fn noise_posterior_covariance(
    w: &GaussianMixture,
    tau: f64,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("noise scale tau must be positive, got {tau}")));
    }
    if x.len() != w.dim() {
        return Err(Error::InvalidInput(format!(
            "probe has dimension {}, mixture has {}",
            x.len(),
            w.dim()
        )));
    }
    Ok(posterior_moments(w, tau, x).1)
}

/// Posterior mean and covariance of ξ given `W' = x`.
pub(crate) fn posterior_moments(
    w: &GaussianMixture,
    tau: f64,
    x: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = w.dim();
    let tau2 = tau * tau;
    let k = w.n_components();
    let mut log_w = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for i in 0..k {
        let diff = x - &w.means()[i];
        match &w.covariances()[i] {
            Covariance::Isotropic(v) => {
                let a = v + COVARIANCE_RIDGE + tau2;
                log_w.push(
                    w.weights()[i].ln() - 0.5 * diff.norm_squared() / a - 0.5 * d as f64 * a.ln(),
                );
                means.push(&diff * (tau2 / a));
                covs.push(ComponentCov::Scalar(tau2 * (v + COVARIANCE_RIDGE) / a));
            }
            Covariance::Full(m) => {
                let mut a = m.clone();
                for j in 0..d {
                    a[(j, j)] += COVARIANCE_RIDGE + tau2;
                }
                let chol = nalgebra::Cholesky::new(a).expect("ridged covariance is SPD");
                let r = chol.solve(&diff);
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                log_w.push(w.weights()[i].ln() - 0.5 * diff.dot(&r) - 0.5 * log_det);
                means.push(r * tau2);
                let mut c = DMatrix::identity(d, d) * tau2 - chol.inverse() * (tau2 * tau2);
                symmetrize(&mut c);
                covs.push(ComponentCov::Matrix(c));
            }
        }
    }
    let weights = normalize_log_weights(&log_w);
    let mut mean = DVector::zeros(d);
    for (wi, m) in weights.iter().zip(&means) {
        mean.axpy(*wi, m, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for ((wi, m), c) in weights.iter().zip(&means).zip(&covs) {
        if *wi == 0.0 {
            continue;
        }
        match c {
            ComponentCov::Scalar(s) => {
                for j in 0..d {
                    cov[(j, j)] += wi * s;
                }
            }
            ComponentCov::Matrix(cm) => cov += cm * *wi,
        }
        let dm = m - &mean;
        cov.ger(*wi, &dm, &dm, 1.0);
    }
    symmetrize(&mut cov);
    (mean, cov)
}

enum ComponentCov {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

/// Softmax of log-weights; entries more than 45 nats below the maximum are zeroed.
pub(crate) fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = log_w
        .iter()
        .map(|&l| if l < max - 45.0 { 0.0 } else { (l - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// How probe points `x` are chosen when searching for the sup over `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    /// Samples of `W'` drawn at every τ.
    pub samples: usize,
    /// Points per segment joining each pair of component means (endpoints included).
    pub ridge_points: usize,
    /// Points per axis of a regular grid spanning the mixture (d ≤ 3 only; 0 disables).
    pub grid_per_axis: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            samples: 64,
            ridge_points: 9,
            grid_per_axis: 0,
        }
    }
}

/// Outcome of a λ search. `lambda_hat` is a probe-sup, hence a lower bound on
/// the true supremum over all `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityEstimate {
    pub lambda_hat: f64,
    pub lambda_cert: Option<f64>,
    pub tau_grid: Vec<f64>,
    pub probes: ProbeSpec,
    pub tau_star: f64,
    pub x_star: Vec<f64>,
    pub label: String,
}

impl RegularityEstimate {
    /// Certificate when available, otherwise the probe-sup.
    pub fn lambda(&self) -> f64 {
        self.lambda_cert.unwrap_or(self.lambda_hat)
    }
}

/// 33 log-spaced scales spanning `[σ_min/10, 10 (R + σ_max)]`.
pub fn default_tau_grid(w: &GaussianMixture) -> Vec<f64> {
    let (smin, smax) = w.sigma_range();
    let lo = (smin.max(1e-6)) / 10.0;
    let hi = 10.0 * (w.max_mean_norm() + smax);
    log_space(lo, hi.max(lo * 10.0), 33)
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Analytic λ certificate: 1 for a single (possibly degenerate) Gaussian,
/// `1 + R²/σ²` for a common-σ isotropic mixture with `‖mean_i‖ ≤ R`.
pub fn lambda_certificate(w: &GaussianMixture) -> Option<f64> {
    if w.n_components() == 1 {
        return Some(1.0);
    }
    let sigma = w.common_sigma()?;
    let r = w.max_mean_norm();
    Some(1.0 + r * r / (sigma * sigma))
}

/// Points on the segments between every pair of component means.
pub fn ridge_probes(means: &[DVector<f64>], per_segment: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = means.to_vec();
    if per_segment < 3 {
        return out;
    }
    let k = means.len();
    // cap the number of segments; beyond 32 means keep 3 nearest neighbours
    let pairs: Vec<(usize, usize)> = if k <= 32 {
        (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect()
    } else {
        let mut p = Vec::new();
        for i in 0..k {
            let mut nn: Vec<(f64, usize)> = (0..k)
                .filter(|&j| j != i)
                .map(|j| ((&means[i] - &means[j]).norm(), j))
                .collect();
            nn.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(_, j) in nn.iter().take(3) {
                p.push((i.min(j), i.max(j)));
            }
        }
        p.sort_unstable();
        p.dedup();
        p
    };
    for (i, j) in pairs {
        if (&means[i] - &means[j]).norm() == 0.0 {
            continue;
        }
        for s in 1..(per_segment - 1) {
            let f = s as f64 / (per_segment - 1) as f64;
            out.push(&means[i] + (&means[j] - &means[i]) * f);
        }
    }
    out
}

fn grid_probes(w: &GaussianMixture, per_axis: usize, tau: f64) -> Vec<DVector<f64>> {
    let d = w.dim();
    if per_axis < 2 || d > 3 {
        return Vec::new();
    }
    let (_, smax) = w.sigma_range();
    let ext = w.max_mean_norm() + 3.0 * (smax + tau);
    let axis: Vec<f64> = (0..per_axis)
        .map(|i| -ext + 2.0 * ext * i as f64 / (per_axis - 1) as f64)
        .collect();
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            DVector::from_fn(d, |_, _| {
                let v = axis[idx % per_axis];
                idx /= per_axis;
                v
            })
        })
        .collect()
}

/// Probe-sup of `‖cov(ξ | W' = x)‖_op / τ²` over the τ grid and probe set.
pub fn estimate_lambda(
    w: &GaussianMixture,
    tau_grid: &[f64],
    probes: &ProbeSpec,
    rng: &mut Stream,
) -> Result<RegularityEstimate> {
    if tau_grid.is_empty() || tau_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("tau grid must be non-empty and positive".into()));
    }
    let ridge = ridge_probes(w.means(), probes.ridge_points);
    let mut best = (f64::NEG_INFINITY, tau_grid[0], DVector::zeros(w.dim()));
    for &tau in tau_grid {
        let mut pts = ridge.clone();
        pts.extend(grid_probes(w, probes.grid_per_axis, tau));
        for _ in 0..probes.samples {
            let k = pick_component(w, rng);
            let x = w.draw_component(k, rng);
            let xi = DVector::from_fn(w.dim(), |_, _| tau * rng.sample::<f64, _>(StandardNormal));
            pts.push(x + xi);
        }
        let vals: Vec<f64> = pts
            .par_iter()
            .map(|x| {
                let (_, c) = posterior_moments(w, tau, x);
                symmetric_spectral_norm(&c, DENSE_EIGEN_CAP) / (tau * tau)
            })
            .collect();
        for (v, x) in vals.into_iter().zip(pts) {
            if v > best.0 {
                best = (v, tau, x);
            }
        }
    }
    Ok(RegularityEstimate {
        lambda_hat: best.0,
        lambda_cert: lambda_certificate(w),
        tau_grid: tau_grid.to_vec(),
        probes: *probes,
        tau_star: best.1,
        x_star: best.2.iter().copied().collect(),
        label: "probe-sup (lower bound)".into(),
    })
}

fn pick_component(w: &GaussianMixture, rng: &mut Stream) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in w.weights().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    w.n_components() - 1
}

/// Exact law of `alpha X_0 + beta X_1` for independent mixture endpoints.
pub fn convolve_endpoints(
    pi0: &GaussianMixture,
    pi1: &GaussianMixture,
    alpha: f64,
    beta: f64,
) -> Result<GaussianMixture> {
    let (k0, k1) = (pi0.n_components(), pi1.n_components());
    if k0 * k1 > MAX_CONVOLVED_COMPONENTS {
        return Err(Error::SizeLimit {
            what: "convolved mixture components",
            size: k0 * k1,
            cap: MAX_CONVOLVED_COMPONENTS,
            hint: "",
        });
    }
    if pi0.dim() != pi1.dim() {
        return Err(Error::InvalidInput("endpoint dimensions differ".into()));
    }
    let d = pi0.dim();
    let mut weights = Vec::with_capacity(k0 * k1);
    let mut means = Vec::with_capacity(k0 * k1);
    let mut covs = Vec::with_capacity(k0 * k1);
    for i in 0..k0 {
        for j in 0..k1 {
            weights.push(pi0.weights()[i] * pi1.weights()[j]);
            means.push(&pi0.means()[i] * alpha + &pi1.means()[j] * beta);
            let c0 = &pi0.covariances()[i];
            let c1 = &pi1.covariances()[j];
            let a2 = alpha * alpha;
            let b2 = beta * beta;
            covs.push(match (c0, c1) {
                (Covariance::Isotropic(u), Covariance::Isotropic(v)) => {
                    Covariance::Isotropic(a2 * u + b2 * v + COVARIANCE_RIDGE)
                }
                _ => {
                    let m = c0.matrix(d) * a2 + c1.matrix(d) * b2
                        + DMatrix::identity(d, d) * COVARIANCE_RIDGE;
                    Covariance::Full(m)
                }
            });
        }
    }
    // renormalise against rounding in the weight products
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GaussianMixture::new(weights, means, covs)
}

/// λ profile of the interpolant marginals `alpha_t X_0 + beta_t X_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRegularity {
    pub times: Vec<f64>,
    pub estimates: Vec<RegularityEstimate>,
    pub max_lambda_hat: f64,
    /// Supremum of per-time certificates; `None` if any time lacks one.
    pub max_lambda_cert: Option<f64>,
}

impl MarginalRegularity {
    pub fn lambda(&self) -> f64 {
        self.max_lambda_cert.unwrap_or(self.max_lambda_hat)
    }
}

pub fn interpolant_marginal_regularity(
    pi0: &GaussianMixture,
    pi1: &GaussianMixture,
    s: &Schedule,
    t_grid: &[f64],
    probes: &ProbeSpec,
    rng: &mut Stream,
) -> Result<MarginalRegularity> {
    let mut estimates = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let c = s.eval(t)?;
        let w = convolve_endpoints(pi0, pi1, c.alpha, c.beta)?;
        let grid = default_tau_grid(&w);
        estimates.push(estimate_lambda(&w, &grid, probes, rng)?);
    }
    let max_lambda_hat = estimates
        .iter()
        .map(|e| e.lambda_hat)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_lambda_cert = estimates
        .iter()
        .map(|e| e.lambda_cert)
        .try_fold(f64::NEG_INFINITY, |acc, c| c.map(|v| acc.max(v)));
    Ok(MarginalRegularity {
        times: t_grid.to_vec(),
        estimates,
        max_lambda_hat,
        max_lambda_cert,
    })
}

/// High-probability check of `‖cov(ξ | W')‖_op ≤ 2 d c² τ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighProbabilityCheck {
    pub c: f64,
    pub tau: f64,
    pub n_samples: usize,
    pub violation_rate: f64,
    /// `6 d exp(-c²/2)`
    pub bound: f64,
    /// 95% binomial half-width of the violation rate.
    pub ci_half_width: f64,
    pub pass: bool,
}

pub fn high_probability_cov_check(
    w: &GaussianMixture,
    tau: f64,
    c: f64,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<HighProbabilityCheck> {
    Ok(high_probability_cov_checks(w, tau, &[c], n_samples, rng)?[0])
}

/// Several thresholds `c` evaluated on one shared sample of `W'`.
pub fn high_probability_cov_checks(
    w: &GaussianMixture,
    tau: f64,
    cs: &[f64],
    n_samples: usize,
    rng: &mut Stream,
) -> Result<Vec<HighProbabilityCheck>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if cs.iter().any(|&c| !(c >= 1.0)) {
        return Err(Error::InvalidInput("thresholds c must be >= 1".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let d = w.dim();
    let pts: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| {
            let k = pick_component(w, rng);
            let x = w.draw_component(k, rng);
            x + DVector::from_fn(d, |_, _| tau * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let norms: Vec<f64> = pts
        .par_iter()
        .map(|x| {
            let (_, cov) = posterior_moments(w, tau, x);
            symmetric_spectral_norm(&cov, DENSE_EIGEN_CAP)
        })
        .collect();
    Ok(cs
        .iter()
        .map(|&c| {
            let threshold = 2.0 * d as f64 * c * c * tau * tau;
            let hits = norms.iter().filter(|&&v| v > threshold).count();
            let rate = hits as f64 / n_samples as f64;
            let p = rate.max(1.0 / n_samples as f64);
            let half = 1.96 * (p * (1.0 - p) / n_samples as f64).sqrt();
            let bound = 6.0 * d as f64 * (-0.5 * c * c).exp();
            HighProbabilityCheck {
                c,
                tau,
                n_samples,
                violation_rate: rate,
                bound,
                ci_half_width: half,
                pass: rate <= bound + 3.0 * half,
            }
        })
        .collect())
}
