//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Solver;
use crate::mixtures::{GaussianMixture, MixtureSpec};
use crate::regularity::ProbeSpec;
use crate::schedules::{Profile, Schedule};
use crate::velocity::{LipschitzProbes, TimeProfile};

/// Schedule as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    GenericConcave { radius: f64, delta: f64 },
    Vp { radius: f64, delta: f64 },
    Ve { gamma_0: f64, gamma_1: f64 },
    Custom { alpha: Profile, beta: Profile, gamma: Profile },
}

impl ScheduleSpec {
    fn gamma_ends(&self) -> (f64, f64) {
        match self {
            ScheduleSpec::GenericConcave { radius, delta } => {
                let g = Profile::ConcaveArc { scale: *radius, delta: *delta };
                (g.eval(0.0).0, g.eval(1.0).0)
            }
            ScheduleSpec::Vp { radius, delta } => {
                let rate = std::f64::consts::FRAC_PI_2 - delta;
                (*radius, radius * rate.cos())
            }
            ScheduleSpec::Ve { gamma_0, gamma_1 } => (*gamma_0, *gamma_1),
            ScheduleSpec::Custom { gamma, .. } => (gamma.eval(0.0).0, gamma.eval(1.0).0),
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        match self.clone() {
            ScheduleSpec::GenericConcave { radius, delta } => Schedule::generic_concave(radius, delta),
            ScheduleSpec::Vp { radius, delta } => Schedule::vp(radius, delta),
            ScheduleSpec::Ve { gamma_0, gamma_1 } => Schedule::ve(gamma_0, gamma_1),
            ScheduleSpec::Custom { alpha, beta, gamma } => Schedule::custom(alpha, beta, gamma),
        }
    }
}

/// Sinusoidal perturbation `c h(t) sin(ωᵀx + φ) u` of the exact field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Raw amplitudes `c`. Exactly one of `amplitudes` and `epsilons` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Vec<f64>>,
    /// Target L² errors; amplitudes are solved for using linearity of ε in `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    pub omega: Vec<f64>,
    #[serde(default)]
    pub phase: f64,
    pub direction: Vec<f64>,
    #[serde(default = "constant_profile")]
    pub time_profile: TimeProfile,
}

fn constant_profile() -> TimeProfile {
    TimeProfile::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    /// Uniform nodes on [0, 1] for the λ profile.
    pub lambda_nodes: usize,
    /// Uniform nodes on [0, 1] for the pointwise Lipschitz profile.
    pub lipschitz_nodes: usize,
    /// Panels of the graded Gauss–Legendre rule used for `∫ L_t dt`.
    pub integral_panels: usize,
    /// Check times of the marginal-law comparison.
    pub w2_times: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            lambda_nodes: 21,
            lipschitz_nodes: 21,
            integral_panels: 32,
            w2_times: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Probes {
    pub regularity: ProbeSpec,
    pub lipschitz: LipschitzProbes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusSpec {
    pub quantile: f64,
    pub samples: usize,
}

impl Default for RadiusSpec {
    fn default() -> Self {
        Self {
            quantile: 0.999,
            samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularitySpec {
    /// Noise scale of the high-probability covariance check.
    pub hp_tau: f64,
    pub hp_thresholds: Vec<f64>,
    pub hp_samples: usize,
}

impl Default for RegularitySpec {
    fn default() -> Self {
        Self {
            hp_tau: 1.0,
            hp_thresholds: vec![1.0, 1.5, 2.0, 3.0],
            hp_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_mc")]
    pub n_mc: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Optional in PF-ODE runs, where the Gaussian `Z` is the reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi0: Option<MixtureSpec>,
    pub pi1: MixtureSpec,
    pub schedule: ScheduleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub probes: Probes,
    #[serde(default)]
    pub radius: RadiusSpec,
    #[serde(default)]
    pub regularity: RegularitySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSpec>,
}

fn default_particles() -> usize {
    2000
}

fn default_mc() -> usize {
    100_000
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Endpoints and schedule built from a validated config.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub pi0: GaussianMixture,
    pub pi1: GaussianMixture,
    pub schedule: Schedule,
}

impl Instance {
    pub fn dim(&self) -> usize {
        self.pi1.dim()
    }
}

fn mixture(spec: &MixtureSpec, path: &str) -> Result<GaussianMixture> {
    GaussianMixture::try_from(spec.clone()).map_err(|e| Error::config(path, e.to_string()))
}

fn check_vec(v: &[f64], d: usize, path: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::config(path, format!("expected {d} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(path, "entries must be finite"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { msg, .. } => Error::config(path.display().to_string(), msg),
            other => other,
        })
    }

    /// Checks every field and builds the instance. All failures are
    /// [`Error::Config`] naming the offending field.
    pub fn validate(&self) -> Result<Instance> {
        let (g0, g1) = self.schedule.gamma_ends();
        if !(g0 > 0.0) || !(g1 > 0.0) {
            return Err(Error::config(
                "schedule",
                format!("relaxed boundary needs gamma_0 > 0 and gamma_1 > 0 (got {g0}, {g1})"),
            ));
        }
        let schedule = self.schedule.build().map_err(|e| Error::config("schedule", e.to_string()))?;
        let pi1 = mixture(&self.pi1, "pi1")?;
        let d = pi1.dim();
        let pi0 = match &self.pi0 {
            Some(spec) => mixture(spec, "pi0")?,
            None if schedule.alpha_vanishes() => GaussianMixture::standard(d),
            None => return Err(Error::config("pi0", "required unless alpha is identically zero")),
        };
        if pi0.dim() != d {
            return Err(Error::config("pi0", format!("dimension {} differs from pi1 ({d})", pi0.dim())));
        }
        if self.n_particles < 2 {
            return Err(Error::config("n_particles", "need at least 2"));
        }
        if self.n_mc < 1000 {
            return Err(Error::config("n_mc", "need at least 1000"));
        }
        self.solver.validate().map_err(|e| Error::config("solver", e.to_string()))?;
        if let Some(p) = &self.perturbation {
            check_vec(&p.omega, d, "perturbation.omega")?;
            check_vec(&p.direction, d, "perturbation.direction")?;
            if p.direction.iter().all(|&x| x == 0.0) {
                return Err(Error::config("perturbation.direction", "must be non-zero"));
            }
            p.time_profile
                .validate()
                .map_err(|e| Error::config("perturbation.time_profile", e.to_string()))?;
            match (&p.amplitudes, &p.epsilons) {
                (Some(a), None) if !a.is_empty() && a.iter().all(|&c| c >= 0.0 && c.is_finite()) => {}
                (None, Some(e)) if !e.is_empty() && e.iter().all(|&x| x > 0.0 && x.is_finite()) => {}
                (Some(_), Some(_)) => {
                    return Err(Error::config("perturbation", "give amplitudes or epsilons, not both"))
                }
                (None, None) => return Err(Error::config("perturbation", "needs amplitudes or epsilons")),
                _ => {
                    return Err(Error::config(
                        "perturbation",
                        "amplitudes must be >= 0 and epsilons > 0, and the grid non-empty",
                    ))
                }
            }
        }
        let g = &self.grids;
        if g.lambda_nodes < 2 || g.lipschitz_nodes < 2 {
            return Err(Error::config("grids", "node counts must be at least 2"));
        }
        if g.integral_panels < 2 {
            return Err(Error::config("grids.integral_panels", "need at least 2 panels"));
        }
        if g.w2_times.is_empty() || g.w2_times.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("grids.w2_times", "times must lie in (0, 1]"));
        }
        if g.w2_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("grids.w2_times", "times must be strictly increasing"));
        }
        if !(0.9..1.0).contains(&self.radius.quantile) || self.radius.samples < 100 {
            return Err(Error::config("radius", "quantile must lie in [0.9, 1) with at least 100 samples"));
        }
        let r = &self.regularity;
        if !(r.hp_tau > 0.0) || r.hp_samples == 0 || r.hp_thresholds.iter().any(|&c| !(c >= 1.0)) {
            return Err(Error::config("regularity", "need hp_tau > 0, hp_samples > 0 and thresholds >= 1"));
        }
        if let Some(s) = &self.scaling {
            if s.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
                return Err(Error::config("scaling.epsilons", "entries must be positive"));
            }
        }
        Ok(Instance {
            name: self.name.clone(),
            pi0,
            pi1,
            schedule,
        })
    }

    pub(crate) fn perturbation_vectors(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        self.perturbation
            .as_ref()
            .map(|p| (DVector::from_vec(p.omega.clone()), DVector::from_vec(p.direction.clone())))
    }
}
