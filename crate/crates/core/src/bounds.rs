//! Right-hand sides of the Wasserstein and Lipschitz bounds, and the report
//! type pairing each with its measured left-hand side.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_adaptive, QuadratureSpec};
use crate::schedules::{schedule_integrals, Schedule};

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Theorem {
    /// `W2 ≤ ε exp(∫L)`
    T3_1,
    /// `∫L* ≤ λ I_γ + √λ R (I_α + I_β)`
    T3_2,
    /// `W2 ≤ C^√λ ε (γmax/γmin)^(2λ)`
    T3_8,
    /// T3_8 plus `√d γmin`
    T3_9,
    /// Optimal `γmin` scaling
    C3_10,
    /// `∫L* ≤ λ (1 + log(1/γ1))`
    C4_3_VP,
    /// `∫L* ≤ λ log(1/γ1)`
    C4_3_VE,
    /// `W2 ≤ ε (e/γ1)^λ`
    T4_4_VP,
    /// `W2 ≤ ε (1/γ1)^λ`
    T4_4_VE,
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfodeVariant {
    Vp,
    Ve,
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn gamma_pair(gamma_min: f64, gamma_max: f64) -> Result<()> {
    if gamma_min > 0.0 && gamma_max >= gamma_min && gamma_max.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "need gamma_max >= gamma_min > 0, got {gamma_min}, {gamma_max}"
        )))
    }
}

fn gamma_one(gamma_1: f64) -> Result<()> {
    if gamma_1 > 0.0 && gamma_1 < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("need 0 < gamma_1 < 1, got {gamma_1}")))
    }
}

/// `ε exp(∫L)`
pub fn rhs_theorem_3_1(epsilon: f64, lipschitz_integral: f64) -> Result<f64> {
    nonneg("epsilon", epsilon)?;
    nonneg("lipschitz integral", lipschitz_integral)?;
    Ok(epsilon * lipschitz_integral.exp())
}

/// `λ ∫|γ̇|/γ + √λ R (∫|α̇|/γ + ∫|β̇|/γ)`
pub fn rhs_theorem_3_2(lambda: f64, radius: f64, s: &Schedule, spec: &QuadratureSpec) -> Result<f64> {
    let ints = schedule_integrals(s, radius, spec)?;
    theorem_3_2_from_parts(lambda, radius, ints.i_gamma, ints.i_alpha, ints.i_beta)
}

fn theorem_3_2_from_parts(lambda: f64, radius: f64, i_gamma: f64, i_alpha: f64, i_beta: f64) -> Result<f64> {
    check_lambda(lambda)?;
    nonneg("R", radius)?;
    Ok(lambda * i_gamma + lambda.sqrt() * radius * (i_alpha + i_beta))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 1.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("lambda must be >= 1, got {lambda}")))
    }
}

/// `C^√λ ε (γmax/γmin)^(2λ)`
pub fn rhs_theorem_3_8(epsilon: f64, lambda: f64, c: f64, gamma_min: f64, gamma_max: f64) -> Result<f64> {
    nonneg("epsilon", epsilon)?;
    check_lambda(lambda)?;
    if !(c >= 1.0) {
        return Err(Error::InvalidInput(format!("C must be >= 1, got {c}")));
    }
    gamma_pair(gamma_min, gamma_max)?;
    Ok(c.powf(lambda.sqrt()) * epsilon * (gamma_max / gamma_min).powf(2.0 * lambda))
}

/// `rhs_theorem_3_8 + √d γmin`
pub fn rhs_theorem_3_9(
    epsilon: f64,
    lambda: f64,
    c: f64,
    gamma_min: f64,
    gamma_max: f64,
    d: usize,
) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be >= 1".into()));
    }
    Ok(rhs_theorem_3_8(epsilon, lambda, c, gamma_min, gamma_max)? + (d as f64).sqrt() * gamma_min)
}

/// `d^(-1/(4λ+2)) ε^(1/(2λ+1))`
pub fn gamma_min_rule(epsilon: f64, d: usize, lambda: f64) -> f64 {
    (d as f64).powf(-1.0 / (4.0 * lambda + 2.0)) * epsilon.powf(1.0 / (2.0 * lambda + 1.0))
}

/// Grid minimiser of `rhs_theorem_3_9` over `γmin ∈ [γmax·1e-10, γmax]`
/// (log grid with `points` nodes). Returns `(γ*, value)`.
pub fn minimize_theorem_3_9(
    epsilon: f64,
    lambda: f64,
    c: f64,
    gamma_max: f64,
    d: usize,
    points: usize,
) -> Result<(f64, f64)> {
    if points < 2 {
        return Err(Error::InvalidInput("grid needs at least two points".into()));
    }
    let (lo, hi) = ((gamma_max * 1e-10).ln(), gamma_max.ln());
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 0..points {
        let g = (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp();
        let v = rhs_theorem_3_9(epsilon, lambda, c, g, gamma_max, d)?;
        if v < best.1 {
            best = (g, v);
        }
    }
    Ok(best)
}

/// `λ (1 + log(1/γ1))` for VP, `λ log(1/γ1)` for VE.
pub fn rhs_corollary_4_3(variant: PfodeVariant, lambda: f64, gamma_1: f64) -> Result<f64> {
    check_lambda(lambda)?;
    gamma_one(gamma_1)?;
    let log_term = (1.0 / gamma_1).ln();
    Ok(match variant {
        PfodeVariant::Vp => lambda * (1.0 + log_term),
        PfodeVariant::Ve => lambda * log_term,
    })
}

/// `ε (e/γ1)^λ` for VP, `ε (1/γ1)^λ` for VE.
pub fn rhs_theorem_4_4(variant: PfodeVariant, epsilon: f64, lambda: f64, gamma_1: f64) -> Result<f64> {
    nonneg("epsilon", epsilon)?;
    check_lambda(lambda)?;
    gamma_one(gamma_1)?;
    Ok(match variant {
        PfodeVariant::Vp => epsilon * (std::f64::consts::E / gamma_1).powf(lambda),
        PfodeVariant::Ve => epsilon * (1.0 / gamma_1).powf(lambda),
    })
}

/// Bound on `W2(π̃, π)` for the relaxed boundary `coeff·X + γ Z` with `‖X‖ ≤ R`:
/// `sqrt((1 − coeff)² R² + d γ²)`.
pub fn relaxation_w2_bound(coeff: f64, radius: f64, d: usize, gamma: f64) -> f64 {
    ((1.0 - coeff).powi(2) * radius * radius + d as f64 * gamma * gamma).sqrt()
}

/// Which Lipschitz envelope `K_t` to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KtForm {
    /// `λ|γ̇|/γ + √λ R (|α̇|/α + |β̇|/β)`; singular where α or β vanish.
    General,
    /// `λ|γ̇|/γ + min(λ|β̇|/β, √λ R |β̇|/γ)`
    Pfode,
    /// `λ|γ̇|/γ + √λ R (|α̇| + |β̇|)/γ`, the pointwise Lipschitz bound.
    Envelope,
}

/// Class-defining Lipschitz envelope `K_t` as a function of time.
#[derive(Debug, Clone)]
pub struct KtProfile {
    pub lambda: f64,
    pub radius: f64,
    pub form: KtForm,
    schedule: Schedule,
}

pub fn kt_profile(lambda: f64, radius: f64, s: &Schedule, form: KtForm) -> Result<KtProfile> {
    check_lambda(lambda)?;
    nonneg("R", radius)?;
    if form == KtForm::Pfode && !s.alpha_vanishes() {
        return Err(Error::Precondition("the PF-ODE envelope needs alpha identically zero".into()));
    }
    Ok(KtProfile {
        lambda,
        radius,
        form,
        schedule: s.clone(),
    })
}

/// `|ċ|/c`, treating `0/0` as zero and reporting a genuine pole.
fn log_rate(value: f64, deriv: f64, name: &str, t: f64) -> Result<f64> {
    if deriv == 0.0 {
        Ok(0.0)
    } else if value == 0.0 {
        Err(Error::Domain(format!(
            "{name} vanishes at t = {t} with non-zero derivative; the general K_t is singular there"
        )))
    } else {
        Ok(deriv.abs() / value.abs())
    }
}

impl KtProfile {
    pub fn eval(&self, t: f64) -> Result<f64> {
        let c = self.schedule.eval(t)?;
        let l = self.lambda;
        let base = l * c.gamma_dot.abs() / c.gamma;
        let sr = l.sqrt() * self.radius;
        Ok(match self.form {
            KtForm::General => {
                base + sr
                    * (log_rate(c.alpha, c.alpha_dot, "alpha", t)?
                        + log_rate(c.beta, c.beta_dot, "beta", t)?)
            }
            KtForm::Pfode => {
                let second = sr * c.beta_dot.abs() / c.gamma;
                let first = if c.beta_dot == 0.0 {
                    0.0
                } else if c.beta == 0.0 {
                    f64::INFINITY
                } else {
                    l * c.beta_dot.abs() / c.beta.abs()
                };
                base + first.min(second)
            }
            KtForm::Envelope => base + sr * (c.alpha_dot.abs() + c.beta_dot.abs()) / c.gamma,
        })
    }

    /// `∫_0^1 K_t dt` by adaptive quadrature.
    pub fn integral(&self, spec: &QuadratureSpec) -> Result<f64> {
        let mut breaks = self.schedule.kinks(spec);
        if self.form == KtForm::Pfode {
            // the min switches branch where λ/β = √λ R/γ
            let sw = |t: f64| {
                let c = self.schedule.eval_unchecked(t);
                self.lambda * c.gamma - self.lambda.sqrt() * self.radius * c.beta
            };
            breaks.extend(crate::quadrature::sign_changes(sw, 0.0, 1.0, spec.scan_points));
        }
        // probe for singularities before integrating
        for k in 0..=spec.scan_points {
            self.eval(k as f64 / spec.scan_points as f64)?;
        }
        let failure = std::cell::RefCell::new(None);
        let v = integrate_adaptive(
            |t| {
                self.eval(t).unwrap_or_else(|e| {
                    failure.borrow_mut().get_or_insert(e);
                    0.0
                })
            },
            0.0,
            1.0,
            &breaks,
            spec,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        v
    }
}

/// A measured left-hand side against a computed right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub instance: String,
    pub lhs_measured: f64,
    pub rhs_computed: f64,
    pub constituents: BTreeMap<String, f64>,
    pub slack: f64,
    pub pass: bool,
    pub note: Option<String>,
}

/// Slack policy: `max(1e-6, 1e-3 · rhs)`.
pub fn slack_for(rhs: f64) -> f64 {
    (1e-3 * rhs).max(1e-6)
}

impl BoundReport {
    pub fn new(
        theorem: Theorem,
        instance: impl Into<String>,
        lhs_measured: f64,
        rhs_computed: f64,
        constituents: BTreeMap<String, f64>,
    ) -> Self {
        let slack = slack_for(rhs_computed);
        Self {
            theorem,
            instance: instance.into(),
            lhs_measured,
            rhs_computed,
            constituents,
            slack,
            pass: lhs_measured <= rhs_computed + slack,
            note: None,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    fn get(&self, key: &str) -> Result<f64> {
        self.constituents
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("{} report lacks constituent `{key}`", self.theorem)))
    }

    /// Recomputes the right-hand side from the stored constituents alone.
    pub fn recompute_rhs(&self) -> Result<f64> {
        let g = |k: &str| self.get(k);
        match self.theorem {
            Theorem::T3_1 => rhs_theorem_3_1(g("epsilon")?, g("lipschitz_integral")?),
            Theorem::T3_2 => theorem_3_2_from_parts(
                g("lambda")?,
                g("R")?,
                g("i_gamma")?,
                g("i_alpha")?,
                g("i_beta")?,
            ),
            Theorem::T3_8 => rhs_theorem_3_8(g("epsilon")?, g("lambda")?, g("C")?, g("gamma_min")?, g("gamma_max")?),
            Theorem::T3_9 => Ok(rhs_theorem_3_8(
                g("epsilon")?,
                g("lambda")?,
                g("C")?,
                g("gamma_min")?,
                g("gamma_max")?,
            )? + g("relaxation_term")?),
            Theorem::C3_10 => Ok(g("factor")?.ln()),
            Theorem::C4_3_VP => rhs_corollary_4_3(PfodeVariant::Vp, g("lambda")?, g("gamma_1")?),
            Theorem::C4_3_VE => rhs_corollary_4_3(PfodeVariant::Ve, g("lambda")?, g("gamma_1")?),
            Theorem::T4_4_VP => rhs_theorem_4_4(PfodeVariant::Vp, g("epsilon")?, g("lambda")?, g("gamma_1")?),
            Theorem::T4_4_VE => rhs_theorem_4_4(PfodeVariant::Ve, g("epsilon")?, g("lambda")?, g("gamma_1")?),
        }
    }
}

/// Builds a constituent map from `(name, value)` pairs.
pub fn constituents<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_examples() {
        assert!((rhs_theorem_3_1(0.1, 2f64.ln()).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(rhs_theorem_3_1(0.0, 3.0).unwrap(), 0.0);
        assert!((rhs_theorem_3_8(0.01, 1.0, 1.0, 0.1, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let v = rhs_theorem_3_9(0.0, 1.0, 1.0, 0.05, 1.0, 4).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
        assert!((rhs_corollary_4_3(PfodeVariant::Ve, 1.0, 0.01).unwrap() - 4.605170185988091).abs() < 1e-12);
        assert!((rhs_corollary_4_3(PfodeVariant::Vp, 1.0, 0.01).unwrap() - 5.605170185988091).abs() < 1e-12);
        assert!((rhs_theorem_4_4(PfodeVariant::Ve, 0.001, 1.0, 0.01).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(rhs_theorem_3_1(-1.0, 0.0).is_err());
        assert!(rhs_theorem_3_8(0.1, 0.5, 1.0, 0.1, 1.0).is_err());
        assert!(rhs_theorem_3_8(0.1, 1.0, 1.0, 1.0, 0.1).is_err());
        assert!(rhs_corollary_4_3(PfodeVariant::Vp, 1.0, 1.0).is_err());
    }

    #[test]
    fn general_form_is_singular_at_the_boundary() {
        let s = Schedule::generic_concave(1.0, 0.01).unwrap();
        let k = kt_profile(1.0, 1.0, &s, KtForm::General).unwrap();
        assert!(matches!(k.eval(1.0), Err(Error::Domain(_))));
        assert!(matches!(k.eval(0.0), Err(Error::Domain(_))));
        assert!(k.eval(0.5).is_ok());
        assert!(k.integral(&QuadratureSpec::default()).is_err());
    }

    #[test]
    fn pfode_envelopes() {
        let ve = Schedule::ve(1.0, 0.01).unwrap();
        let k = kt_profile(2.0, 3.0, &ve, KtForm::Pfode).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!((k.eval(t).unwrap() - 2.0 * 100f64.ln()).abs() < 1e-12);
        }
        let vp = Schedule::vp(1.0, 0.01).unwrap();
        let k = kt_profile(1.0, 1.0, &vp, KtForm::Pfode).unwrap();
        for t in [0.0, 1e-4, 1e-3] {
            let c = vp.eval(t).unwrap();
            let expected = c.gamma_dot.abs() / c.gamma + c.beta_dot.abs() / c.gamma;
            assert!((k.eval(t).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn reports_recompute_and_pass() {
        let r = BoundReport::new(
            Theorem::T3_8,
            "x",
            0.5,
            rhs_theorem_3_8(0.01, 1.0, 1.5, 0.1, 1.0).unwrap(),
            constituents([
                ("epsilon", 0.01),
                ("lambda", 1.0),
                ("C", 1.5),
                ("gamma_min", 0.1),
                ("gamma_max", 1.0),
            ]),
        );
        assert!(r.pass);
        assert!((r.recompute_rhs().unwrap() - r.rhs_computed).abs() < 1e-12);
    }
}
