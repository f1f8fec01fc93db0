//! Finite-difference checks of the closed-form Jacobians.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Stream;
use crate::velocity::{Endpoint, ExactVelocityField, VelocityField};

pub const FD_TOLERANCE: f64 = 1e-5;
pub const PFODE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub n_probes: usize,
    /// Relative Frobenius error of `∇v^X` against central differences.
    pub max_err_velocity: f64,
    pub max_err_mean_x0: f64,
    pub max_err_mean_x1: f64,
    /// Noise-covariance form against the general form; only when `alpha ≡ 0`.
    pub max_err_pfode: Option<f64>,
    pub pass: bool,
}

/// Central differences with step `1e-5 (1 + ‖x‖)`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = x.len();
    let h = 1e-5 * (1.0 + x.norm());
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        j.set_column(k, &((f(&xp)? - f(&xm)?) / (2.0 * h)));
    }
    Ok(j)
}

/// `‖a − b‖_F / max(‖b‖_F, 1e-3)`
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-3)
}

/// Probes `(x, t)` with `t` uniform on `[0.02, 0.98]` and `x ~ X_t`.
pub fn gradient_check(f: &ExactVelocityField, n_probes: usize, rng: &mut Stream) -> Result<GradCheck> {
    let pfode = f.schedule().alpha_vanishes();
    let mut out = GradCheck {
        n_probes,
        max_err_velocity: 0.0,
        max_err_mean_x0: 0.0,
        max_err_mean_x1: 0.0,
        max_err_pfode: pfode.then_some(0.0),
        pass: false,
    };
    for _ in 0..n_probes {
        let t = 0.02 + 0.96 * rng.random::<f64>();
        let x = match f.sample_interpolant(t, 1, rng)?.pop() {
            Some(s) => s.xt,
            None => continue,
        };
        let j = f.jacobian(&x, t)?;
        let fd = fd_jacobian(|y| f.velocity(y, t), &x)?;
        out.max_err_velocity = out.max_err_velocity.max(relative_error(&j, &fd));
        for (which, slot) in [(Endpoint::X0, &mut out.max_err_mean_x0), (Endpoint::X1, &mut out.max_err_mean_x1)] {
            let a = f.conditional_mean_jacobian(&x, t, which)?;
            let b = fd_jacobian(|y| f.conditional_mean(y, t, which), &x)?;
            *slot = slot.max(relative_error(&a, &b));
        }
        if let Some(m) = out.max_err_pfode.as_mut() {
            let alt = f.velocity_jacobian_pfode(&x, t)?;
            *m = m.max(relative_error(&alt, &j));
        }
    }
    out.pass = out.max_err_velocity <= FD_TOLERANCE
        && out.max_err_mean_x0 <= FD_TOLERANCE
        && out.max_err_mean_x1 <= FD_TOLERANCE
        && out.max_err_pfode.is_none_or(|e| e <= PFODE_TOLERANCE);
    Ok(out)
}
