//! Interpolant coefficient schedules `(alpha_t, beta_t, gamma_t)`.
//!
//! The interpolant is `X_t = alpha_t X_0 + beta_t X_1 + gamma_t Z`. Every
//! coefficient is a [`Profile`]: a named built-in function with an analytic
//! derivative. Presets cover the concave-noise schedule, VP and VE
//! probability-flow schedules; custom schedules combine named profiles.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_adaptive, sign_changes, QuadratureSpec};

/// A scalar function of time with its analytic derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Profile {
    /// `value`
    Constant { value: f64 },
    /// `start + (end - start) t`
    Linear { start: f64, end: f64 },
    /// `2 scale sqrt((delta + t)(1 + delta - t))`
    ConcaveArc { scale: f64, delta: f64 },
    /// `amplitude cos(rate t)`
    Cosine { amplitude: f64, rate: f64 },
    /// `amplitude sin(rate t)`
    Sine { amplitude: f64, rate: f64 },
    /// `start^(1-t) end^t`, both ends positive.
    Geometric { start: f64, end: f64 },
    /// `scale t^exponent`, exponent ≥ 1.
    Power { scale: f64, exponent: f64 },
    /// `outer(inner(t))`
    Compose {
        outer: Box<Profile>,
        inner: Box<Profile>,
    },
}

impl Profile {
    /// Value and derivative at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            Profile::Constant { value } => (*value, 0.0),
            Profile::Linear { start, end } => (start + (end - start) * t, end - start),
            Profile::ConcaveArc { scale, delta } => {
                let a = delta + t;
                let b = 1.0 + delta - t;
                let root = (a * b).sqrt();
                (2.0 * scale * root, scale * (b - a) / root)
            }
            Profile::Cosine { amplitude, rate } => {
                let (s, c) = (rate * t).sin_cos();
                (amplitude * c, -amplitude * rate * s)
            }
            Profile::Sine { amplitude, rate } => {
                let (s, c) = (rate * t).sin_cos();
                (amplitude * s, amplitude * rate * c)
            }
            Profile::Geometric { start, end } => {
                let v = start.powf(1.0 - t) * end.powf(t);
                (v, v * (end / start).ln())
            }
            Profile::Power { scale, exponent } => {
                let v = scale * t.powf(*exponent);
                let d = if *exponent == 1.0 {
                    *scale
                } else {
                    scale * exponent * t.powf(exponent - 1.0)
                };
                (v, d)
            }
            Profile::Compose { outer, inner } => {
                let (u, du) = inner.eval(t);
                let (v, dv) = outer.eval(u);
                (v, dv * du)
            }
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        match self {
            Profile::Constant { value } => *value == 0.0,
            Profile::Linear { start, end } => *start == 0.0 && *end == 0.0,
            Profile::ConcaveArc { scale, .. }
            | Profile::Cosine {
                amplitude: scale, ..
            }
            | Profile::Sine {
                amplitude: scale, ..
            }
            | Profile::Power { scale, .. } => *scale == 0.0,
            Profile::Geometric { .. } => false,
            Profile::Compose { outer, .. } => outer.is_identically_zero(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("{name}: {msg}")));
        match self {
            Profile::ConcaveArc { delta, .. } if *delta <= 0.0 => {
                bad("concave arc needs delta > 0")
            }
            Profile::Geometric { start, end } if *start <= 0.0 || *end <= 0.0 => {
                bad("geometric profile needs positive endpoints")
            }
            Profile::Power { exponent, .. } if *exponent < 1.0 => {
                bad("power profile needs exponent >= 1 to be C^1 on [0,1]")
            }
            Profile::Compose { outer, inner } => {
                outer.validate(name)?;
                inner.validate(name)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    GenericConcave,
    Vp,
    Ve,
    Custom,
}

/// The six schedule values at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    pub gamma_dot: f64,
}

/// Interpolant schedule. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub alpha: Profile,
    pub beta: Profile,
    pub gamma: Profile,
    /// Relaxation parameter of the concave and VP presets.
    pub delta: Option<f64>,
}

impl Schedule {
    /// `alpha = 1 - t`, `beta = t`, `gamma = 2R sqrt((delta+t)(1+delta-t))`.
    pub fn generic_concave(radius: f64, delta: f64) -> Result<Self> {
        if !(radius > 0.0) || !(delta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "concave schedule needs R > 0 and delta > 0 (R = {radius}, delta = {delta})"
            )));
        }
        Self::checked(Schedule {
            kind: ScheduleKind::GenericConcave,
            alpha: Profile::Linear {
                start: 1.0,
                end: 0.0,
            },
            beta: Profile::Linear {
                start: 0.0,
                end: 1.0,
            },
            gamma: Profile::ConcaveArc {
                scale: radius,
                delta,
            },
            delta: Some(delta),
        })
    }

    /// Variance-preserving PF-ODE schedule: `alpha = 0`,
    /// `beta = sin((pi/2 - delta) t)`, `gamma = R cos((pi/2 - delta) t)`.
    pub fn vp(radius: f64, delta: f64) -> Result<Self> {
        if !(radius > 0.0) || !(delta > 0.0 && delta < FRAC_PI_2) {
            return Err(Error::InvalidInput(format!(
                "VP schedule needs R > 0 and 0 < delta < pi/2 (R = {radius}, delta = {delta})"
            )));
        }
        let rate = FRAC_PI_2 - delta;
        Self::checked(Schedule {
            kind: ScheduleKind::Vp,
            alpha: Profile::Constant { value: 0.0 },
            beta: Profile::Sine {
                amplitude: 1.0,
                rate,
            },
            gamma: Profile::Cosine {
                amplitude: radius,
                rate,
            },
            delta: Some(delta),
        })
    }

    /// Variance-exploding PF-ODE schedule: `alpha = 0`, `beta = 1`,
    /// `gamma = gamma_0^(1-t) gamma_1^t`.
    pub fn ve(gamma_0: f64, gamma_1: f64) -> Result<Self> {
        if !(gamma_0 > gamma_1 && gamma_1 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "VE schedule needs gamma_0 > gamma_1 > 0 (got {gamma_0}, {gamma_1})"
            )));
        }
        Self::checked(Schedule {
            kind: ScheduleKind::Ve,
            alpha: Profile::Constant { value: 0.0 },
            beta: Profile::Constant { value: 1.0 },
            gamma: Profile::Geometric {
                start: gamma_0,
                end: gamma_1,
            },
            delta: None,
        })
    }

    pub fn custom(alpha: Profile, beta: Profile, gamma: Profile) -> Result<Self> {
        Self::checked(Schedule {
            kind: ScheduleKind::Custom,
            alpha,
            beta,
            gamma,
            delta: None,
        })
    }

    fn checked(s: Schedule) -> Result<Self> {
        s.validate()?;
        Ok(s)
    }

    /// Checks profile parameters and positivity of `gamma` on a 4096-point grid.
    pub fn validate(&self) -> Result<()> {
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        self.gamma.validate("gamma")?;
        let n = 4096;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let g = self.gamma.eval(t).0;
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "gamma must be positive on [0,1]; gamma({t}) = {g}"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Coefficients> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> Coefficients {
        let (alpha, alpha_dot) = self.alpha.eval(t);
        let (beta, beta_dot) = self.beta.eval(t);
        let (gamma, gamma_dot) = self.gamma.eval(t);
        Coefficients {
            alpha,
            beta,
            gamma,
            alpha_dot,
            beta_dot,
            gamma_dot,
        }
    }

    pub fn alpha_vanishes(&self) -> bool {
        self.alpha.is_identically_zero()
    }

    /// Minimum and maximum of `gamma` on [0, 1] (scan plus golden-section polish).
    pub fn gamma_range(&self) -> (f64, f64) {
        let g = |t: f64| self.gamma.eval(t).0;
        let n = 4096;
        let vals: Vec<f64> = (0..=n).map(|k| g(k as f64 / n as f64)).collect();
        let polish = |sign: f64| {
            let (imax, _) = vals
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                    if sign * v > acc.1 {
                        (i, sign * v)
                    } else {
                        acc
                    }
                });
            let mut lo = (imax.saturating_sub(1)) as f64 / n as f64;
            let mut hi = ((imax + 1).min(n)) as f64 / n as f64;
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..80 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if sign * g(a) > sign * g(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let cands = [vals[imax], g(0.5 * (lo + hi))];
            if sign > 0.0 {
                cands[0].max(cands[1])
            } else {
                cands[0].min(cands[1])
            }
        };
        (polish(-1.0), polish(1.0))
    }

    /// Kinks of `|gamma_dot|`, `|alpha_dot|`, `|beta_dot|` in (0, 1).
    pub(crate) fn kinks(&self, spec: &QuadratureSpec) -> Vec<f64> {
        let mut pts = Vec::new();
        for p in [&self.gamma, &self.alpha, &self.beta] {
            pts.extend(sign_changes(|t| p.eval(t).1, 0.0, 1.0, spec.scan_points));
        }
        pts.sort_by(f64::total_cmp);
        pts
    }
}

/// Total variation of `log gamma` on [0, 1]: `∫ |gamma_dot| / gamma dt`.
pub fn log_gamma_total_variation(s: &Schedule, spec: &QuadratureSpec) -> Result<f64> {
    let breaks = sign_changes(|t| s.gamma.eval(t).1, 0.0, 1.0, spec.scan_points);
    integrate_adaptive(
        |t| {
            let (g, gd) = s.gamma.eval(t);
            gd.abs() / g
        },
        0.0,
        1.0,
        &breaks,
        spec,
    )
}

/// The schedule-dependent integrals entering the Lipschitz and Wasserstein bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleIntegrals {
    /// `∫ |gamma_dot| / gamma`
    pub i_gamma: f64,
    /// `∫ |alpha_dot| / gamma`
    pub i_alpha: f64,
    /// `∫ |beta_dot| / gamma`
    pub i_beta: f64,
    /// `exp(R (i_alpha + i_beta))`
    pub c: f64,
}

pub fn schedule_integrals(
    s: &Schedule,
    radius: f64,
    spec: &QuadratureSpec,
) -> Result<ScheduleIntegrals> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidInput(format!("radius must be >= 0, got {radius}")));
    }
    let breaks = s.kinks(spec);
    let integral = |p: &Profile| {
        integrate_adaptive(
            |t| p.eval(t).1.abs() / s.gamma.eval(t).0,
            0.0,
            1.0,
            &breaks,
            spec,
        )
    };
    let i_gamma = log_gamma_total_variation(s, spec)?;
    let i_alpha = integral(&s.alpha)?;
    let i_beta = integral(&s.beta)?;
    Ok(ScheduleIntegrals {
        i_gamma,
        i_alpha,
        i_beta,
        c: (radius * (i_alpha + i_beta)).exp(),
    })
}

/// `delta` such that the concave preset with radius `radius` has `gamma_min`
/// as its boundary value.
pub fn concave_delta_for_gamma_min(radius: f64, gamma_min: f64) -> f64 {
    let q = (gamma_min / (2.0 * radius)).powi(2);
    0.5 * ((1.0 + 4.0 * q).sqrt() - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    #[test]
    fn preset_values() {
        let s = Schedule::generic_concave(1.0, 0.01).unwrap();
        let c = s.eval(0.5).unwrap();
        assert!((c.gamma - 1.02).abs() < 1e-14);

        let ve = Schedule::ve(1.0, 0.01).unwrap();
        let c = ve.eval(0.0).unwrap();
        assert!((c.gamma - 1.0).abs() < 1e-15);
        assert!((c.gamma_dot - 0.01f64.ln()).abs() < 1e-12);
        assert!((c.gamma_dot + 4.60517).abs() < 1e-5);

        let vp = Schedule::vp(1.0, 0.01).unwrap();
        let c = vp.eval(0.0).unwrap();
        assert_eq!((c.alpha, c.beta, c.gamma), (0.0, 0.0, 1.0));
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        let s = Schedule::generic_concave(1.0, 0.01).unwrap();
        assert!(matches!(s.eval(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.eval(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_must_stay_positive() {
        let r = Schedule::custom(
            Profile::Linear {
                start: 1.0,
                end: 0.0,
            },
            Profile::Linear {
                start: 0.0,
                end: 1.0,
            },
            Profile::Linear {
                start: 1.0,
                end: 0.0,
            },
        );
        assert!(r.is_err());
    }

    #[test]
    fn concave_preset_matches_closed_form_on_grid() {
        let (r, d) = (1.7, 0.03);
        let s = Schedule::generic_concave(r, d).unwrap();
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            let g = s.eval(t).unwrap().gamma;
            let exact = 2.0 * r * ((d + t) * (1.0 + d - t)).sqrt();
            assert!((g - exact).abs() <= 1e-15 * exact.max(1.0));
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let presets = [
            Schedule::generic_concave(2.0, 0.05).unwrap(),
            Schedule::vp(1.0, 0.01).unwrap(),
            Schedule::ve(1.0, 0.01).unwrap(),
            Schedule::custom(
                Profile::Compose {
                    outer: Box::new(Profile::Linear {
                        start: 1.0,
                        end: 0.0,
                    }),
                    inner: Box::new(Profile::Power {
                        scale: 1.0,
                        exponent: 2.0,
                    }),
                },
                Profile::Sine {
                    amplitude: 1.0,
                    rate: 1.2,
                },
                Profile::Geometric {
                    start: 0.5,
                    end: 0.1,
                },
            )
            .unwrap(),
        ];
        let h = 1e-6;
        for s in &presets {
            for k in 0..=1000 {
                let t = (k as f64 / 1000.0).clamp(h, 1.0 - h);
                let c = s.eval(t).unwrap();
                let p = s.eval(t + h).unwrap();
                let m = s.eval(t - h).unwrap();
                let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
                assert!((fd(p.alpha, m.alpha) - c.alpha_dot).abs() < 1e-6);
                assert!((fd(p.beta, m.beta) - c.beta_dot).abs() < 1e-6);
                assert!((fd(p.gamma, m.gamma) - c.gamma_dot).abs() < 1e-6, "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn log_gamma_variation_of_constant_is_zero() {
        let s = Schedule::custom(
            Profile::Linear {
                start: 1.0,
                end: 0.0,
            },
            Profile::Linear {
                start: 0.0,
                end: 1.0,
            },
            Profile::Constant { value: 0.3 },
        )
        .unwrap();
        assert_eq!(log_gamma_total_variation(&s, &spec()).unwrap(), 0.0);
    }

    #[test]
    fn log_gamma_variation_of_unimodal_concave() {
        for &(r, d) in &[(1.0, 0.01), (3.0, 1e-4), (0.5, 0.2)] {
            let s = Schedule::generic_concave(r, d).unwrap();
            let (gmin, gmax) = s.gamma_range();
            let tv = log_gamma_total_variation(&s, &spec()).unwrap();
            assert!((tv - 2.0 * (gmax / gmin).ln()).abs() < 1e-8, "{tv}");
        }
    }

    #[test]
    fn log_gamma_variation_of_ve() {
        let s = Schedule::ve(1.0, 0.01).unwrap();
        let tv = log_gamma_total_variation(&s, &spec()).unwrap();
        assert!((tv - 100f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn ve_integrals_vanish_for_alpha_beta() {
        let s = Schedule::ve(1.0, 0.05).unwrap();
        let i = schedule_integrals(&s, 3.0, &spec()).unwrap();
        assert_eq!(i.i_alpha, 0.0);
        assert_eq!(i.i_beta, 0.0);
        assert_eq!(i.c, 1.0);
    }

    #[test]
    fn concave_reciprocal_integral_is_pi_over_r() {
        // R ∫ (|alpha_dot| + |beta_dot|)/gamma -> pi as delta -> 0.
        let r = 2.0;
        let d = 1e-4;
        let s = Schedule::generic_concave(r, d).unwrap();
        let i = schedule_integrals(&s, r, &spec()).unwrap();
        let sum = i.i_alpha + i.i_beta;
        // closed form: (1/R) * 2 [asin sqrt((1+d)/(1+2d)) - asin sqrt(d/(1+2d))]
        let a = 1.0 + 2.0 * d;
        let exact = (2.0 / r) * (((1.0 + d) / a).sqrt().asin() - (d / a).sqrt().asin());
        assert!((sum - exact).abs() < 1e-10);
        let two_sig = |x: f64| (x * 10.0 / 10f64.powf(x.log10().floor())).round();
        assert_eq!(two_sig(sum), two_sig(std::f64::consts::PI / r));
    }

    #[test]
    fn concave_delta_inversion() {
        let d = concave_delta_for_gamma_min(2.5, 0.3);
        let s = Schedule::generic_concave(2.5, d).unwrap();
        assert!((s.gamma_range().0 - 0.3).abs() < 1e-12);
    }
}
