//! Gaussian-mixture endpoint distributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Diagonal ridge added to degenerate covariances before any factorisation.
pub const COVARIANCE_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `variance * I`
    Isotropic(f64),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(v) => DMatrix::identity(dim, dim) * *v,
            Covariance::Full(m) => m.clone(),
        }
    }

    pub fn scaled(&self, c2: f64, add: f64) -> Covariance {
        match self {
            Covariance::Isotropic(v) => Covariance::Isotropic(c2 * v + add),
            Covariance::Full(m) => {
                let d = m.nrows();
                Covariance::Full(m * c2 + DMatrix::identity(d, d) * add)
            }
        }
    }

    pub fn isotropic_variance(&self) -> Option<f64> {
        match self {
            Covariance::Isotropic(v) => Some(*v),
            Covariance::Full(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Factor {
    /// Lower Cholesky factor (full) or standard deviation (isotropic).
    lower: Option<DMatrix<f64>>,
    sd: f64,
    log_det: f64,
}

/// Weighted mixture of Gaussians in `R^d`. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<Covariance>,
    dim: usize,
    factors: Vec<Factor>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self
                .covariances
                .iter()
                .zip(&other.covariances)
                .all(|(a, b)| a.matrix(self.dim) == b.matrix(other.dim))
    }
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<Covariance>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidInput(format!(
                "mixture needs matching non-empty weights/means/covariances ({} / {} / {})",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidInput("means must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        let mut factors = Vec::with_capacity(k);
        for (i, c) in covariances.iter().enumerate() {
            factors.push(factor(c, dim).map_err(|e| {
                Error::InvalidInput(format!("component {i}: {e}"))
            })?);
        }
        Ok(Self {
            weights,
            means,
            covariances,
            dim,
            factors,
        })
    }

    /// All components share covariance `sigma^2 I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<DVector<f64>>, sigma: f64) -> Result<Self> {
        let k = means.len();
        Self::new(weights, means, vec![Covariance::Isotropic(sigma * sigma); k])
    }

    pub fn gaussian(mean: DVector<f64>, cov: Covariance) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(0, I_d)`
    pub fn standard(dim: usize) -> Self {
        Self::gaussian(DVector::zeros(dim), Covariance::Isotropic(1.0)).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    /// Common isotropic `sigma` if every component is `sigma^2 I` with the same sigma.
    pub fn common_sigma(&self) -> Option<f64> {
        let v0 = self.covariances[0].isotropic_variance()?;
        self.covariances
            .iter()
            .all(|c| c.isotropic_variance() == Some(v0))
            .then(|| v0.sqrt())
    }

    pub fn max_mean_norm(&self) -> f64 {
        self.means.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }

    /// Smallest and largest component standard deviation along any direction.
    pub fn sigma_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for c in &self.covariances {
            match c {
                Covariance::Isotropic(v) => {
                    lo = lo.min(v.sqrt());
                    hi = hi.max(v.sqrt());
                }
                Covariance::Full(m) => {
                    let e = m.clone().symmetric_eigenvalues();
                    lo = lo.min(e.min().max(0.0).sqrt());
                    hi = hi.max(e.max().max(0.0).sqrt());
                }
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> DVector<f64> {
        self.means
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim), |acc, (m, &w)| acc + m * w)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for ((m, c), &w) in self.means.iter().zip(&self.covariances).zip(&self.weights) {
            let dm = m - &mu;
            out += (c.matrix(self.dim) + &dm * dm.transpose()) * w;
        }
        out
    }

    /// Draws `n` i.i.d. points.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Vec<DVector<f64>> {
        self.sample_labelled(n, rng).into_iter().map(|(_, x)| x).collect()
    }

    /// Draws `n` points together with their component labels.
    pub fn sample_labelled(&self, n: usize, rng: &mut Stream) -> Vec<(usize, DVector<f64>)> {
        let pick = WeightedIndex::new(&self.weights).expect("weights validated");
        (0..n)
            .map(|_| {
                let k = if self.weights.len() == 1 { 0 } else { pick.sample(rng) };
                (k, self.draw_component(k, rng))
            })
            .collect()
    }

    pub(crate) fn draw_component<R: Rng>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &self.factors[k];
        match &f.lower {
            Some(l) => &self.means[k] + l * z,
            None => &self.means[k] + z * f.sd,
        }
    }

    pub fn component_log_density(&self, k: usize, x: &DVector<f64>) -> f64 {
        let f = &self.factors[k];
        let diff = x - &self.means[k];
        let quad = match &f.lower {
            Some(l) => {
                let y = l
                    .solve_lower_triangular(&diff)
                    .expect("factor is non-singular");
                y.norm_squared()
            }
            None => diff.norm_squared() / (f.sd * f.sd),
        };
        -0.5 * (quad + f.log_det + self.dim as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Log mixture density with log-sum-exp stabilisation.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact law of `coeff * X + noise_scale * Z` for `X` from this mixture.
    pub fn relax_boundary(&self, coeff: f64, noise_scale: f64) -> Result<GaussianMixture> {
        if !(noise_scale >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise scale must be >= 0, got {noise_scale}"
            )));
        }
        let c2 = coeff * coeff;
        let add = noise_scale * noise_scale;
        GaussianMixture::new(
            self.weights.clone(),
            self.means.iter().map(|m| m * coeff).collect(),
            self.covariances.iter().map(|c| c.scaled(c2, add)).collect(),
        )
    }

    /// Radius of the smallest centred ball holding mass `q`, by Monte Carlo.
    pub fn effective_support_radius(
        &self,
        q: f64,
        n: usize,
        rng: &mut Stream,
    ) -> Result<SupportRadius> {
        if !(0.9..1.0).contains(&q) {
            return Err(Error::InvalidInput(format!(
                "support quantile must lie in [0.9, 1), got {q}"
            )));
        }
        if n < 100 {
            return Err(Error::InvalidInput("need at least 100 samples".into()));
        }
        let mut norms: Vec<f64> = self.sample(n, rng).iter().map(|x| x.norm()).collect();
        norms.sort_by(f64::total_cmp);
        let idx = |p: f64| (((p * n as f64).ceil() as usize).max(1) - 1).min(n - 1);
        // order-statistic 95% band for the q-quantile
        let half = 1.96 * (q * (1.0 - q) / n as f64).sqrt();
        let estimate = norms[idx(q)];
        let floor = self.max_mean_norm();
        Ok(SupportRadius {
            radius: estimate.max(floor),
            quantile: q,
            ci: (norms[idx((q - half).max(0.0))], norms[idx((q + half).min(1.0))]),
            tail_mass_excluded: 1.0 - q,
            max_mean_norm: floor,
            n_samples: n,
        })
    }
}

fn factor(c: &Covariance, dim: usize) -> Result<Factor> {
    match c {
        Covariance::Isotropic(v) => {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("variance must be positive, got {v}")));
            }
            Ok(Factor {
                lower: None,
                sd: v.sqrt(),
                log_det: dim as f64 * v.ln(),
            })
        }
        Covariance::Full(m) => {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::InvalidInput(format!(
                    "covariance is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            let asym = (m - m.transpose()).abs().max();
            if asym > 1e-12 * m.abs().max().max(1.0) {
                return Err(Error::InvalidInput("covariance is not symmetric".into()));
            }
            // positive semidefinite is allowed: a Gaussian on a subspace
            let min_eig = m.clone().symmetric_eigenvalues().min();
            if !(min_eig >= -1e-12 * m.abs().max().max(1.0)) {
                return Err(Error::InvalidInput(format!(
                    "covariance is not positive semidefinite (min eigenvalue {min_eig:e})"
                )));
            }
            let ridged = m + DMatrix::identity(dim, dim) * COVARIANCE_RIDGE;
            let chol = nalgebra::Cholesky::new(ridged)
                .ok_or_else(|| Error::InvalidInput("Cholesky factorisation failed".into()))?;
            let l = chol.l();
            let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok(Factor {
                lower: Some(l),
                sd: f64::NAN,
                log_det,
            })
        }
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Effective support radius standing in for a bounded-support radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportRadius {
    pub radius: f64,
    pub quantile: f64,
    /// 95% band of the Monte Carlo quantile estimate.
    pub ci: (f64, f64),
    pub tail_mass_excluded: f64,
    pub max_mean_norm: f64,
    pub n_samples: usize,
}

/// Serialized form of a mixture: `sigma` (shared or per component) or full covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Shared(f64),
    PerComponent(Vec<f64>),
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        let means: Vec<DVector<f64>> = spec
            .means
            .iter()
            .map(|m| DVector::from_vec(m.clone()))
            .collect();
        let k = means.len();
        let covs = match (spec.sigma, spec.covariances) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidInput(
                    "give either sigma or covariances, not both".into(),
                ))
            }
            (Some(SigmaSpec::Shared(s)), None) => vec![Covariance::Isotropic(s * s); k],
            (Some(SigmaSpec::PerComponent(v)), None) => {
                if v.len() != k {
                    return Err(Error::InvalidInput("one sigma per component required".into()));
                }
                v.iter().map(|s| Covariance::Isotropic(s * s)).collect()
            }
            (None, Some(rows)) => rows
                .iter()
                .map(|m| {
                    let d = m.len();
                    if m.iter().any(|r| r.len() != d) {
                        return Err(Error::InvalidInput("covariance must be square".into()));
                    }
                    Ok(Covariance::Full(DMatrix::from_fn(d, d, |i, j| m[i][j])))
                })
                .collect::<Result<_>>()?,
            (None, None) => {
                return Err(Error::InvalidInput("mixture needs sigma or covariances".into()))
            }
        };
        GaussianMixture::new(spec.weights, means, covs)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(gm: GaussianMixture) -> Self {
        let means = gm.means.iter().map(|m| m.iter().copied().collect()).collect();
        let iso: Option<Vec<f64>> = gm
            .covariances
            .iter()
            .map(|c| c.isotropic_variance().map(f64::sqrt))
            .collect();
        let (sigma, covariances) = match iso {
            Some(s) if s.iter().all(|&v| v == s[0]) => (Some(SigmaSpec::Shared(s[0])), None),
            Some(s) => (Some(SigmaSpec::PerComponent(s)), None),
            None => (
                None,
                Some(
                    gm.covariances
                        .iter()
                        .map(|c| {
                            let m = c.matrix(gm.dim);
                            (0..gm.dim)
                                .map(|i| (0..gm.dim).map(|j| m[(i, j)]).collect())
                                .collect()
                        })
                        .collect(),
                ),
            ),
        };
        MixtureSpec {
            weights: gm.weights,
            means,
            sigma,
            covariances,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use nalgebra::dvector;

    #[test]
    fn rejects_bad_weights_and_covariances() {
        let m = vec![dvector![0.0]];
        assert!(GaussianMixture::isotropic(vec![0.9], m.clone(), 1.0).is_err());
        assert!(GaussianMixture::isotropic(vec![1.0], m.clone(), 0.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], Covariance::Full(asym)).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], Covariance::Full(indefinite)).is_err());
        // rank-deficient covariances are allowed
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], Covariance::Full(singular)).is_ok());
    }

    #[test]
    fn standard_normal_log_density() {
        let g = GaussianMixture::standard(1);
        assert!((g.log_density(&dvector![0.0]) + 0.918938533204672).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_log_density_at_origin() {
        let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![dvector![-1.0], dvector![1.0]], 1.0)
            .unwrap();
        let expected = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_density(&dvector![0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn far_tail_log_density_is_finite_and_decreasing() {
        let g = GaussianMixture::isotropic(vec![0.3, 0.7], vec![dvector![-1.0], dvector![2.0]], 0.5)
            .unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let x = dvector![10f64.powi(k)];
            let l = g.log_density(&x);
            assert!(l.is_finite());
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn near_degenerate_samples_hug_the_mean() {
        let g = GaussianMixture::gaussian(dvector![1.0, -2.0], Covariance::Isotropic(1e-12)).unwrap();
        let mut rng = stream(1, 0);
        for x in g.sample(1000, &mut rng) {
            assert!((x - dvector![1.0, -2.0]).norm() < 1e-5);
        }
    }

    #[test]
    fn relax_identity_and_gaussian_closure() {
        let g = GaussianMixture::isotropic(vec![1.0], vec![dvector![1.0, 2.0]], 0.5).unwrap();
        assert_eq!(g.relax_boundary(1.0, 0.0).unwrap(), g);
        let r = g.relax_boundary(0.9, 0.1).unwrap();
        assert!((r.means()[0].clone() - dvector![0.9, 1.8]).norm() < 1e-15);
        let v = r.covariances()[0].isotropic_variance().unwrap();
        assert!((v - (0.81 * 0.25 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn relaxation_w2_is_within_sqrt_d_gamma() {
        // W2(N(0,s^2 I), N(0,(s^2+g^2) I)) = sqrt(d)(sqrt(s^2+g^2) - s)
        for &(d, s, g) in &[(1usize, 1.0, 0.1), (4, 0.3, 0.5), (2, 1e-3, 0.2)] {
            let base = GaussianMixture::isotropic(vec![1.0], vec![DVector::zeros(d)], s).unwrap();
            let r = base.relax_boundary(1.0, g).unwrap();
            let s2 = r.common_sigma().unwrap();
            let w2 = (d as f64).sqrt() * (s2 - s);
            assert!(w2 <= (d as f64).sqrt() * g + 1e-15);
        }
    }

    #[test]
    fn spec_round_trip_preserves_mixture() {
        let g = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![dvector![0.0, 1.0], dvector![2.0, 0.0]],
            vec![
                Covariance::Full(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])),
                Covariance::Isotropic(0.5),
            ],
        )
        .unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: GaussianMixture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
