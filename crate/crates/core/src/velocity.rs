//! Expected velocity fields of the interpolant and their Jacobians.
//!
//! With Gaussian-mixture endpoints the triple `(X_0, X_1, Z)` is, given the
//! component pair `(i, j)`, jointly Gaussian with `X_t`. Conditioning on
//! `X_t = x` is therefore exact per pair, and posterior pair weights mix the
//! per-pair answers. Covariances conditional on `X_t = x` are assembled by the
//! law of total covariance (within-pair plus between-pair dispersion).
//!
//! `v^X` would be set to zero off the support of `X_t`; with Gaussian
//! components that support is all of `R^d`, so no clamping ever happens.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::operator_norm;
use crate::mixtures::{Covariance, GaussianMixture};
use crate::quadrature::{integrate_adaptive, QuadratureSpec};
use crate::regularity::{normalize_log_weights, ridge_probes};
use crate::rng::Stream;
use crate::schedules::{Coefficients, Schedule};

/// Largest number of endpoint component pairs conditioned exactly.
pub const MAX_PAIRS: usize = 10_000;

/// A time-dependent vector field with a spatial Jacobian.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>>;
}

/// A field defined on top of an exact interpolant field.
pub trait InterpolantField: VelocityField {
    fn exact(&self) -> &ExactVelocityField;
    /// Analytic bound on the Lipschitz constant added to the exact field at `t`.
    fn lipschitz_increment(&self, t: f64) -> f64;
}

/// Which endpoint a conditional mean refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    X0,
    X1,
}

#[derive(Debug, Clone)]
struct Pair {
    i: usize,
    j: usize,
    log_prior: f64,
}

/// Exact `v^X(x, t) = E[Ẋ_t | X_t = x]` for mixture endpoints.
#[derive(Debug, Clone)]
pub struct ExactVelocityField {
    pi0: GaussianMixture,
    pi1: GaussianMixture,
    schedule: Schedule,
    pairs: Vec<Pair>,
}

enum SigmaInv {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

struct PairPosterior {
    pair: usize,
    weight: f64,
    e0: DVector<f64>,
    e1: DVector<f64>,
    ez: DVector<f64>,
    sigma_inv: Option<SigmaInv>,
}

/// Per-pair conditional moments at one `(x, t)`.
pub(crate) struct Posterior {
    c: Coefficients,
    terms: Vec<PairPosterior>,
}

fn apply(cov: &Covariance, r: &DVector<f64>) -> DVector<f64> {
    match cov {
        Covariance::Isotropic(v) => r * *v,
        Covariance::Full(m) => m * r,
    }
}

impl ExactVelocityField {
    pub fn new(pi0: GaussianMixture, pi1: GaussianMixture, schedule: Schedule) -> Result<Self> {
        if pi0.dim() != pi1.dim() {
            return Err(Error::InvalidInput(format!(
                "endpoint dimensions differ ({} vs {})",
                pi0.dim(),
                pi1.dim()
            )));
        }
        let n_pairs = pi0.n_components() * pi1.n_components();
        if n_pairs > MAX_PAIRS {
            return Err(Error::SizeLimit {
                what: "endpoint component pairs",
                size: n_pairs,
                cap: MAX_PAIRS,
                hint: "",
            });
        }
        schedule.validate()?;
        let mut pairs = Vec::with_capacity(n_pairs);
        for (i, &wi) in pi0.weights().iter().enumerate() {
            for (j, &wj) in pi1.weights().iter().enumerate() {
                if wi > 0.0 && wj > 0.0 {
                    pairs.push(Pair {
                        i,
                        j,
                        log_prior: wi.ln() + wj.ln(),
                    });
                }
            }
        }
        Ok(Self {
            pi0,
            pi1,
            schedule,
            pairs,
        })
    }

    pub fn pi0(&self) -> &GaussianMixture {
        &self.pi0
    }

    pub fn pi1(&self) -> &GaussianMixture {
        &self.pi1
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        let c = self.schedule.eval(t)?;
        if !(c.gamma > 0.0) {
            return Err(Error::Domain(format!(
                "gamma({t}) = {} is not positive; the boundary is not relaxed",
                c.gamma
            )));
        }
        Ok(c)
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "point has dimension {}, field has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn posterior(&self, x: &DVector<f64>, t: f64, with_cov: bool) -> Result<Posterior> {
        self.check_point(x)?;
        let c = self.coefficients(t)?;
        let d = self.dim();
        let (a, b, g) = (c.alpha, c.beta, c.gamma);
        let mut log_w = Vec::with_capacity(self.pairs.len());
        let mut terms = Vec::with_capacity(self.pairs.len());
        for (k, p) in self.pairs.iter().enumerate() {
            let m = &self.pi0.means()[p.i];
            let n = &self.pi1.means()[p.j];
            let s = &self.pi0.covariances()[p.i];
            let tc = &self.pi1.covariances()[p.j];
            let diff = x - (m * a + n * b);
            let (r, log_dens, sigma_inv) = match (s, tc) {
                (Covariance::Isotropic(sv), Covariance::Isotropic(tv)) => {
                    let var = a * a * sv + b * b * tv + g * g;
                    let r = &diff / var;
                    let ld = -0.5 * diff.norm_squared() / var - 0.5 * d as f64 * var.ln();
                    (r, ld, with_cov.then_some(SigmaInv::Scalar(1.0 / var)))
                }
                _ => {
                    let mut sig = s.matrix(d) * (a * a) + tc.matrix(d) * (b * b);
                    for q in 0..d {
                        sig[(q, q)] += g * g;
                    }
                    let chol: Cholesky<f64, Dyn> = Cholesky::new(sig).ok_or_else(|| {
                        Error::Domain(format!("pair covariance not positive definite at t = {t}"))
                    })?;
                    let r = chol.solve(&diff);
                    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    let ld = -0.5 * diff.dot(&r) - 0.5 * log_det;
                    (r, ld, with_cov.then(|| SigmaInv::Matrix(chol.inverse())))
                }
            };
            log_w.push(p.log_prior + log_dens);
            terms.push(PairPosterior {
                pair: k,
                weight: 0.0,
                e0: m + apply(s, &r) * a,
                e1: n + apply(tc, &r) * b,
                ez: &r * g,
                sigma_inv,
            });
        }
        let w = normalize_log_weights(&log_w);
        for (term, wk) in terms.iter_mut().zip(w) {
            term.weight = wk;
        }
        terms.retain(|term| term.weight > 0.0);
        Ok(Posterior { c, terms })
    }

    /// Posterior weights of the endpoint component pairs, indexed `(i, j)`.
    pub fn pair_weights(&self, x: &DVector<f64>, t: f64) -> Result<Vec<((usize, usize), f64)>> {
        let post = self.posterior(x, t, false)?;
        let mut out: Vec<((usize, usize), f64)> = self
            .pairs
            .iter()
            .map(|p| ((p.i, p.j), 0.0))
            .collect();
        for term in &post.terms {
            out[term.pair].1 = term.weight;
        }
        Ok(out)
    }

    /// `E[X_which | X_t = x]`.
    pub fn conditional_mean(&self, x: &DVector<f64>, t: f64, which: Endpoint) -> Result<DVector<f64>> {
        let post = self.posterior(x, t, false)?;
        Ok(post.mean(|term| match which {
            Endpoint::X0 => term.e0.clone(),
            Endpoint::X1 => term.e1.clone(),
        }))
    }

    /// `-(1/gamma_t) cov_x(X_which, Z)`.
    pub fn conditional_mean_jacobian(
        &self,
        x: &DVector<f64>,
        t: f64,
        which: Endpoint,
    ) -> Result<DMatrix<f64>> {
        let post = self.posterior(x, t, true)?;
        let (a, b) = match which {
            Endpoint::X0 => (1.0, 0.0),
            Endpoint::X1 => (0.0, 1.0),
        };
        Ok(post.cross_cov_with_z(&self.pi0, &self.pi1, &self.pairs, a, b, 0.0) * (-1.0 / post.c.gamma))
    }

    /// `cov_x(Z) = cov(Z, Z | X_t = x)`.
    pub fn noise_covariance(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let post = self.posterior(x, t, true)?;
        Ok(post.cross_cov_with_z(&self.pi0, &self.pi1, &self.pairs, 0.0, 0.0, 1.0))
    }

    /// `cov_x(Ẋ_t, Z)`.
    pub fn velocity_noise_covariance(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let post = self.posterior(x, t, true)?;
        let c = post.c;
        Ok(post.cross_cov_with_z(&self.pi0, &self.pi1, &self.pairs, c.alpha_dot, c.beta_dot, c.gamma_dot))
    }

    /// Jacobian through `cov_x(Z)` alone; valid only when `alpha ≡ 0`.
    pub fn velocity_jacobian_pfode(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        if !self.schedule.alpha_vanishes() {
            return Err(Error::Precondition(
                "the noise-covariance Jacobian form needs alpha identically zero".into(),
            ));
        }
        let post = self.posterior(x, t, true)?;
        let c = post.c;
        if !(c.beta > 0.0) {
            return Err(Error::Domain(format!("beta({t}) = {} must be positive", c.beta)));
        }
        let cov_z = post.cross_cov_with_z(&self.pi0, &self.pi1, &self.pairs, 0.0, 0.0, 1.0);
        let rate = c.gamma_dot / c.gamma;
        let d = self.dim();
        Ok(DMatrix::identity(d, d) * rate - cov_z * (rate - c.beta_dot / c.beta))
    }

    /// Draws `(X_0, X_1, Z)` and forms `X_t`, `Ẋ_t`.
    pub fn sample_interpolant(&self, t: f64, n: usize, rng: &mut Stream) -> Result<Vec<InterpolantSample>> {
        let c = self.coefficients(t)?;
        Ok((0..n).map(|_| self.draw_triple(&c, rng)).collect())
    }

    fn draw_triple(&self, c: &Coefficients, rng: &mut Stream) -> InterpolantSample {
        let d = self.dim();
        let x0 = self.pi0.sample(1, rng).pop().expect("one sample");
        let x1 = self.pi1.sample(1, rng).pop().expect("one sample");
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xt = &x0 * c.alpha + &x1 * c.beta + &z * c.gamma;
        let xdot = &x0 * c.alpha_dot + &x1 * c.beta_dot + &z * c.gamma_dot;
        InterpolantSample { x0, x1, z, xt, xdot }
    }

    /// Exact mixture law of `X_t`.
    pub fn marginal(&self, t: f64) -> Result<GaussianMixture> {
        let c = self.coefficients(t)?;
        let d = self.dim();
        let mut weights = Vec::with_capacity(self.pairs.len());
        let mut means = Vec::with_capacity(self.pairs.len());
        let mut covs = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            weights.push(p.log_prior.exp());
            means.push(&self.pi0.means()[p.i] * c.alpha + &self.pi1.means()[p.j] * c.beta);
            let s = &self.pi0.covariances()[p.i];
            let tc = &self.pi1.covariances()[p.j];
            let g2 = c.gamma * c.gamma;
            covs.push(match (s, tc) {
                (Covariance::Isotropic(u), Covariance::Isotropic(v)) => {
                    Covariance::Isotropic(c.alpha * c.alpha * u + c.beta * c.beta * v + g2)
                }
                _ => Covariance::Full(
                    s.matrix(d) * (c.alpha * c.alpha)
                        + tc.matrix(d) * (c.beta * c.beta)
                        + DMatrix::identity(d, d) * g2,
                ),
            });
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GaussianMixture::new(weights, means, covs)
    }

    pub fn velocities(&self, xs: &[DVector<f64>], t: f64) -> Result<Vec<DVector<f64>>> {
        xs.par_iter().map(|x| self.velocity(x, t)).collect()
    }
}

impl Posterior {
    fn mean(&self, f: impl Fn(&PairPosterior) -> DVector<f64>) -> DVector<f64> {
        let d = self.terms[0].ez.len();
        let mut out = DVector::zeros(d);
        for term in &self.terms {
            out.axpy(term.weight, &f(term), 1.0);
        }
        out
    }

    /// `cov_x(a X_0 + b X_1 + c Z, Z)`.
    fn cross_cov_with_z(
        &self,
        pi0: &GaussianMixture,
        pi1: &GaussianMixture,
        pairs: &[Pair],
        a: f64,
        b: f64,
        c: f64,
    ) -> DMatrix<f64> {
        let co = &self.c;
        let g = co.gamma;
        let d = self.terms[0].ez.len();
        let combo = |term: &PairPosterior| &term.e0 * a + &term.e1 * b + &term.ez * c;
        let mean_a = self.mean(combo);
        let mean_z = self.mean(|term| term.ez.clone());
        let mut out = DMatrix::zeros(d, d);
        for term in &self.terms {
            let w = term.weight;
            let p = &pairs[term.pair];
            let s = &pi0.covariances()[p.i];
            let tc = &pi1.covariances()[p.j];
            // within-pair: -a αγ S Σ⁻¹ - b βγ T Σ⁻¹ + c (I - γ² Σ⁻¹)
            match term.sigma_inv.as_ref().expect("posterior built with covariances") {
                SigmaInv::Scalar(si) => {
                    let sv = s.isotropic_variance().expect("isotropic pair");
                    let tv = tc.isotropic_variance().expect("isotropic pair");
                    let diag = -a * co.alpha * g * sv * si - b * co.beta * g * tv * si
                        + c * (1.0 - g * g * si);
                    for q in 0..d {
                        out[(q, q)] += w * diag;
                    }
                }
                SigmaInv::Matrix(si) => {
                    let mut within = (s.matrix(d) * (-a * co.alpha * g) + tc.matrix(d) * (-b * co.beta * g)
                        - DMatrix::identity(d, d) * (c * g * g))
                        * si;
                    for q in 0..d {
                        within[(q, q)] += c;
                    }
                    out += within * w;
                }
            }
            let da = combo(term) - &mean_a;
            let dz = &term.ez - &mean_z;
            out.ger(w, &da, &dz, 1.0);
        }
        out
    }
}

impl VelocityField for ExactVelocityField {
    fn dim(&self) -> usize {
        self.pi0.dim()
    }

    fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let post = self.posterior(x, t, false)?;
        let c = post.c;
        Ok(post.mean(|term| &term.e0 * c.alpha_dot + &term.e1 * c.beta_dot + &term.ez * c.gamma_dot))
    }

    /// `(gamma_dot/gamma) I - (1/gamma) cov_x(Ẋ_t, Z)`.
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let post = self.posterior(x, t, true)?;
        let c = post.c;
        let cov = post.cross_cov_with_z(&self.pi0, &self.pi1, &self.pairs, c.alpha_dot, c.beta_dot, c.gamma_dot);
        let d = self.dim();
        Ok(DMatrix::identity(d, d) * (c.gamma_dot / c.gamma) - cov / c.gamma)
    }
}

impl InterpolantField for ExactVelocityField {
    fn exact(&self) -> &ExactVelocityField {
        self
    }

    fn lipschitz_increment(&self, _t: f64) -> f64 {
        0.0
    }
}

/// One draw of the interpolant.
#[derive(Debug, Clone)]
pub struct InterpolantSample {
    pub x0: DVector<f64>,
    pub x1: DVector<f64>,
    pub z: DVector<f64>,
    pub xt: DVector<f64>,
    pub xdot: DVector<f64>,
}

/// Time modulation `h(t)` of the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    /// `h ≡ 1`
    Constant,
    /// Indicator of `[start, end]`.
    Window { start: f64, end: f64 },
    /// `sin²(π (t - start)/(end - start))` on `[start, end]`, zero elsewhere.
    Bump { start: f64, end: f64 },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Window { start, end } => {
                if (start..=end).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            TimeProfile::Bump { start, end } => {
                if (start..=end).contains(&t) {
                    (std::f64::consts::PI * (t - start) / (end - start)).sin().powi(2)
                } else {
                    0.0
                }
            }
        }
    }

    /// Points where `h` fails to be smooth.
    pub fn breaks(&self) -> Vec<f64> {
        match *self {
            TimeProfile::Constant => Vec::new(),
            TimeProfile::Window { start, end } | TimeProfile::Bump { start, end } => vec![start, end],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimeProfile::Constant => Ok(()),
            TimeProfile::Window { start, end } | TimeProfile::Bump { start, end } => {
                if (0.0..=1.0).contains(&start) && (0.0..=1.0).contains(&end) && start < end {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!(
                        "time window [{start}, {end}] must satisfy 0 <= start < end <= 1"
                    )))
                }
            }
        }
    }
}

/// `v_θ(x,t) = v^X(x,t) + c h(t) sin(ωᵀx + φ) u`.
#[derive(Debug, Clone)]
pub struct PerturbedVelocityField {
    base: Arc<ExactVelocityField>,
    amplitude: f64,
    omega: DVector<f64>,
    phase: f64,
    direction: DVector<f64>,
    profile: TimeProfile,
}

impl PerturbedVelocityField {
    /// `direction` is normalised to unit length.
    pub fn new(
        base: Arc<ExactVelocityField>,
        amplitude: f64,
        omega: DVector<f64>,
        phase: f64,
        direction: DVector<f64>,
        profile: TimeProfile,
    ) -> Result<Self> {
        let d = base.dim();
        if omega.len() != d || direction.len() != d {
            return Err(Error::InvalidInput(format!(
                "perturbation vectors must have dimension {d}"
            )));
        }
        if !(amplitude >= 0.0) {
            return Err(Error::InvalidInput(format!("amplitude must be >= 0, got {amplitude}")));
        }
        let norm = direction.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput("perturbation direction must be non-zero".into()));
        }
        profile.validate()?;
        Ok(Self {
            base,
            amplitude,
            omega,
            phase,
            direction: direction / norm,
            profile,
        })
    }

    pub fn base(&self) -> &Arc<ExactVelocityField> {
        &self.base
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn profile(&self) -> TimeProfile {
        self.profile
    }

    /// Same perturbation shape with a different amplitude.
    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }

    /// `v_θ − v^X` at `(x, t)`.
    pub fn perturbation(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let h = self.profile.eval(t);
        &self.direction * (self.amplitude * h * (self.omega.dot(x) + self.phase).sin())
    }

    /// `c² h(t)² E sin²(ωᵀX_t + φ)` from the Gaussian characteristic function.
    pub fn squared_error_at(&self, t: f64) -> Result<f64> {
        let h = self.profile.eval(t);
        if h == 0.0 || self.amplitude == 0.0 {
            return Ok(0.0);
        }
        let law = self.base.marginal(t)?;
        let mut e = 0.0;
        for k in 0..law.n_components() {
            let m = &law.means()[k];
            let var = match &law.covariances()[k] {
                Covariance::Isotropic(v) => v * self.omega.norm_squared(),
                Covariance::Full(s) => self.omega.dot(&(s * &self.omega)),
            };
            let phase = self.omega.dot(m) + self.phase;
            e += law.weights()[k] * 0.5 * (1.0 - (2.0 * phase).cos() * (-2.0 * var).exp());
        }
        Ok(self.amplitude * self.amplitude * h * h * e)
    }
}

impl VelocityField for PerturbedVelocityField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        Ok(self.base.velocity(x, t)? + self.perturbation(x, t))
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let mut j = self.base.jacobian(x, t)?;
        let h = self.profile.eval(t);
        let s = self.amplitude * h * (self.omega.dot(x) + self.phase).cos();
        j.ger(s, &self.direction, &self.omega, 1.0);
        Ok(j)
    }
}

impl InterpolantField for PerturbedVelocityField {
    fn exact(&self) -> &ExactVelocityField {
        &self.base
    }

    /// `c h(t) ‖ω‖`
    fn lipschitz_increment(&self, t: f64) -> f64 {
        self.amplitude * self.profile.eval(t) * self.omega.norm()
    }
}

/// L² distance between a perturbed field and the exact field along the interpolant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    /// `ε` from the closed-form per-component expectation integrated in `t`.
    pub epsilon: f64,
    pub epsilon_sq: f64,
    /// Plain Monte Carlo estimate of `ε²` (uniform `t`, shared draws).
    pub mc_epsilon_sq: f64,
    pub mc_std_error: f64,
    /// 95% interval for `ε` from the Monte Carlo estimate.
    pub mc_ci: (f64, f64),
    pub n_mc: usize,
}

/// `ε² = ∫ E‖v_θ(X_t,t) − v^X(X_t,t)‖² dt`.
///
/// The closed form is a perfect control variate for the sin family, so the
/// reported `epsilon` has no Monte Carlo error; the raw estimate and its CI
/// are kept for cross-checking.
pub fn l2_error(
    v: &PerturbedVelocityField,
    n_mc: usize,
    spec: &QuadratureSpec,
    rng: &mut Stream,
) -> Result<EpsilonEstimate> {
    if n_mc < 1000 {
        return Err(Error::InvalidInput(format!("n_mc must be at least 1000, got {n_mc}")));
    }
    let failure = std::cell::RefCell::new(None);
    let eps_sq = integrate_adaptive(
        |t| {
            v.squared_error_at(t).unwrap_or_else(|err| {
                failure.borrow_mut().get_or_insert(err);
                0.0
            })
        },
        0.0,
        1.0,
        &v.profile.breaks(),
        spec,
    );
    if let Some(err) = failure.into_inner() {
        return Err(err);
    }
    let eps_sq = eps_sq?;
    let base = &v.base;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for k in 0..n_mc {
        // stratified uniform times
        let t = (k as f64 + rng.random::<f64>()) / n_mc as f64;
        let c = base.coefficients(t)?;
        let s = base.draw_triple(&c, rng);
        let e = v.perturbation(&s.xt, t).norm_squared();
        sum += e;
        sum_sq += e * e;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
    Ok(EpsilonEstimate {
        epsilon: eps_sq.sqrt(),
        epsilon_sq: eps_sq,
        mc_epsilon_sq: mean,
        mc_std_error: se,
        mc_ci: ((mean - 1.96 * se).max(0.0).sqrt(), (mean + 1.96 * se).sqrt()),
        n_mc,
    })
}

/// How Lipschitz probes are chosen at each time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbes {
    /// Samples of `X_t`.
    pub samples: usize,
    /// Points per segment between pairs of marginal component means.
    pub ridge_points: usize,
}

impl Default for LipschitzProbes {
    fn default() -> Self {
        Self {
            samples: 64,
            ridge_points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    pub times: Vec<f64>,
    /// Probe-sup of `‖∇v‖_op` at each time, including any analytic increment.
    pub l_hat: Vec<f64>,
    /// Analytic increment included in `l_hat`.
    pub increment: Vec<f64>,
    pub argmax: Vec<Vec<f64>>,
}

/// Probe-sup of the Jacobian operator norm of the exact field, plus the
/// field's analytic Lipschitz increment, at each time in `t_grid`.
pub fn lipschitz_profile(
    v: &dyn InterpolantField,
    t_grid: &[f64],
    probes: &LipschitzProbes,
    rng: &mut Stream,
) -> Result<LipschitzProfile> {
    let exact = v.exact();
    let mut out = LipschitzProfile {
        times: t_grid.to_vec(),
        l_hat: Vec::with_capacity(t_grid.len()),
        increment: Vec::with_capacity(t_grid.len()),
        argmax: Vec::with_capacity(t_grid.len()),
    };
    for &t in t_grid {
        let law = exact.marginal(t)?;
        let mut pts = ridge_probes(law.means(), probes.ridge_points);
        pts.extend(law.sample(probes.samples, rng));
        let norms: Vec<f64> = pts
            .par_iter()
            .map(|x| exact.jacobian(x, t).map(|j| operator_norm(&j)))
            .collect::<Result<_>>()?;
        let (k, best) = norms
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &n)| if n > acc.1 { (k, n) } else { acc });
        let inc = v.lipschitz_increment(t);
        out.l_hat.push(best + inc);
        out.increment.push(inc);
        out.argmax.push(pts[k].iter().copied().collect());
    }
    Ok(out)
}

/// Time sampling for the objective comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "t", rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveGap {
    /// `E‖v1 − Ẋ‖² − E‖v2 − Ẋ‖²`
    pub gap_direct: f64,
    /// `E‖v1 − v^X‖² − E‖v2 − v^X‖²`
    pub gap_regression: f64,
    pub se_direct: f64,
    pub se_regression: f64,
    /// Standard error of the paired difference `gap_direct − gap_regression`.
    pub se_difference: f64,
    pub n_mc: usize,
    pub pass: bool,
}

/// Compares the two objective forms on shared interpolant draws.
pub fn objective_gap_check(
    base: &ExactVelocityField,
    v1: &dyn VelocityField,
    v2: &dyn VelocityField,
    n_mc: usize,
    sampling: TimeSampling,
    rng: &mut Stream,
) -> Result<ObjectiveGap> {
    if n_mc < 2 {
        return Err(Error::InvalidInput("need at least two Monte Carlo draws".into()));
    }
    if v1.dim() != base.dim() || v2.dim() != base.dim() {
        return Err(Error::InvalidInput("fields and interpolant differ in dimension".into()));
    }
    let draws: Vec<(f64, InterpolantSample)> = (0..n_mc)
        .map(|_| {
            let t = match sampling {
                TimeSampling::Uniform => rng.random::<f64>(),
                TimeSampling::Fixed(t) => t,
            };
            base.coefficients(t).map(|c| (t, base.draw_triple(&c, rng)))
        })
        .collect::<Result<_>>()?;
    let terms: Vec<(f64, f64)> = draws
        .par_iter()
        .map(|(t, s)| {
            let a = v1.velocity(&s.xt, *t)?;
            let b = v2.velocity(&s.xt, *t)?;
            let vx = base.velocity(&s.xt, *t)?;
            let direct = (&a - &s.xdot).norm_squared() - (&b - &s.xdot).norm_squared();
            let regression = (&a - &vx).norm_squared() - (&b - &vx).norm_squared();
            Ok((direct, regression))
        })
        .collect::<Result<_>>()?;
    let n = n_mc as f64;
    let stats = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let mean = terms.iter().map(f).sum::<f64>() / n;
        let var = terms.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (gd, sd) = stats(&|p| p.0);
    let (gr, sr) = stats(&|p| p.1);
    let (_, sdiff) = stats(&|p| p.0 - p.1);
    let pass = (gd - gr).abs() <= 3.0 * sdiff + 1e-12 * (1.0 + gd.abs());
    Ok(ObjectiveGap {
        gap_direct: gd,
        gap_regression: gr,
        se_direct: sd,
        se_regression: sr,
        se_difference: sdiff,
        n_mc,
        pass,
    })
}
