mod common;

use std::sync::Arc;

use flowbound::mixtures::GaussianMixture;
use flowbound::quadrature::QuadratureSpec;
use flowbound::rng::stream;
use flowbound::schedules::Schedule;
use flowbound::velocity::{
    l2_error, lipschitz_profile, objective_gap_check, Endpoint, ExactVelocityField, LipschitzProbes,
    PerturbedVelocityField, TimeProfile, TimeSampling, VelocityField,
};
use nalgebra::{dvector, DMatrix, DVector};
use rand::Rng;

fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let h = 1e-5 * (1.0 + x.norm());
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        j.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

fn probe_points(f: &ExactVelocityField, n: usize, seed: u64) -> Vec<(DVector<f64>, f64)> {
    let mut rng = stream(seed, 0);
    (0..n)
        .map(|_| {
            let t = 0.02 + 0.96 * rng.random::<f64>();
            let x = f.sample_interpolant(t, 1, &mut rng).unwrap().pop().unwrap().xt;
            (x, t)
        })
        .collect()
}

#[test]
fn jacobian_matches_finite_differences() {
    for (name, f) in common::instances() {
        for (x, t) in probe_points(&f, 50, 11) {
            let j = f.jacobian(&x, t).unwrap();
            let fd = fd_jacobian(|y| f.velocity(y, t).unwrap(), &x);
            let err = common::rel_diff(&fd, &j);
            assert!(err < 1e-5, "{name} at t={t}: relative error {err}");
        }
    }
}

#[test]
fn conditional_mean_jacobians_match_finite_differences() {
    for (name, f) in common::instances() {
        for (x, t) in probe_points(&f, 50, 12) {
            for which in [Endpoint::X0, Endpoint::X1] {
                let j = f.conditional_mean_jacobian(&x, t, which).unwrap();
                let fd = fd_jacobian(|y| f.conditional_mean(y, t, which).unwrap(), &x);
                let err = common::rel_diff(&fd, &j);
                assert!(err < 1e-5, "{name} {which:?} at t={t}: relative error {err}");
            }
        }
    }
}

#[test]
fn noise_covariance_form_agrees_when_alpha_vanishes() {
    let pi1 = GaussianMixture::isotropic(
        vec![0.3, 0.3, 0.4],
        vec![dvector![1.0, 0.0], dvector![-1.0, 0.5], dvector![0.0, -1.2]],
        0.3,
    )
    .unwrap();
    for s in [Schedule::vp(1.0, 0.01).unwrap(), Schedule::ve(1.0, 0.01).unwrap()] {
        let f = ExactVelocityField::new(GaussianMixture::standard(2), pi1.clone(), s).unwrap();
        for (x, t) in probe_points(&f, 50, 13) {
            let a = f.jacobian(&x, t).unwrap();
            let b = f.velocity_jacobian_pfode(&x, t).unwrap();
            assert!(common::rel_diff(&b, &a) < 1e-8);
        }
    }
}

#[test]
fn ve_with_gaussian_target_has_scalar_jacobian() {
    let f = ExactVelocityField::new(
        GaussianMixture::standard(3),
        GaussianMixture::standard(3),
        Schedule::ve(1.0, 0.01).unwrap(),
    )
    .unwrap();
    let t = 0.4;
    let c = f.coefficients(t).unwrap();
    let j = f.velocity_jacobian_pfode(&dvector![0.3, -2.0, 1.0], t).unwrap();
    // beta_dot = 0: (γ̇/γ)(I − cov_x(Z)) with cov_x(Z) = 1/(1 + γ²) I
    let k = c.gamma_dot / c.gamma * (1.0 - 1.0 / (1.0 + c.gamma * c.gamma));
    assert!((j - DMatrix::identity(3, 3) * k).abs().max() < 1e-12);
}

#[test]
fn velocity_is_odd_for_symmetric_endpoints() {
    let pi = GaussianMixture::isotropic(vec![0.5, 0.5], vec![dvector![2.0, -1.0], dvector![-2.0, 1.0]], 0.5).unwrap();
    let f = ExactVelocityField::new(GaussianMixture::standard(2), pi, Schedule::generic_concave(2.0, 0.05).unwrap())
        .unwrap();
    let mut rng = stream(3, 0);
    for _ in 0..50 {
        let x = dvector![rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0];
        let t = rng.random::<f64>();
        let a = f.velocity(&x, t).unwrap();
        let b = f.velocity(&(-&x), t).unwrap();
        assert!((a + b).norm() < 1e-10);
    }
    assert!(f.velocity(&dvector![0.0, 0.0], 0.5).unwrap().norm() < 1e-14);
}

#[test]
fn gaussian_velocity_matches_regression_slope() {
    let f = ExactVelocityField::new(
        GaussianMixture::standard(1),
        GaussianMixture::standard(1),
        Schedule::generic_concave(1.0, 0.05).unwrap(),
    )
    .unwrap();
    let t = 0.3;
    let mut rng = stream(4, 0);
    let draws = f.sample_interpolant(t, 1_000_000, &mut rng).unwrap();
    let sxx: f64 = draws.iter().map(|d| d.xt[0] * d.xt[0]).sum();
    let sxy: f64 = draws.iter().map(|d| d.xt[0] * d.xdot[0]).sum();
    let slope = sxy / sxx;
    let exact = f.velocity(&dvector![1.0], t).unwrap()[0];
    assert!((slope - exact).abs() < 1e-2, "{slope} vs {exact}");
}

#[test]
fn binned_conditional_expectation_reproduces_velocity() {
    let (_, f) = common::instances().into_iter().next().unwrap();
    let t = 0.6;
    let mut rng = stream(5, 0);
    let draws = f.sample_interpolant(t, 400_000, &mut rng).unwrap();
    let width = 0.05;
    for centre in [-1.0, -0.3, 0.0, 0.4, 1.0] {
        let vals: Vec<f64> = draws
            .iter()
            .filter(|d| (d.xt[0] - centre).abs() < 0.5 * width)
            .map(|d| d.xdot[0])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        // average the exact field over the bin to remove the bin-width bias
        let exact: f64 = (0..21)
            .map(|k| f.velocity(&dvector![centre - 0.5 * width + width * k as f64 / 20.0], t).unwrap()[0])
            .sum::<f64>()
            / 21.0;
        assert!((mean - exact).abs() < 3.0 * se + 1e-3, "bin {centre}: {mean} vs {exact} (se {se})");
    }
}

fn perturbed(c: f64, profile: TimeProfile) -> PerturbedVelocityField {
    let base = Arc::new(
        ExactVelocityField::new(
            GaussianMixture::standard(1),
            GaussianMixture::standard(1),
            Schedule::generic_concave(1.0, 0.05).unwrap(),
        )
        .unwrap(),
    );
    PerturbedVelocityField::new(base, c, dvector![1.0], 0.0, dvector![1.0], profile).unwrap()
}

#[test]
fn epsilon_closed_form_agrees_with_monte_carlo() {
    let v = perturbed(0.1, TimeProfile::Constant);
    let mut rng = stream(6, 0);
    let e = l2_error(&v, 200_000, &QuadratureSpec::default(), &mut rng).unwrap();
    // independent oracle: ε² = c² ∫ ½(1 − exp(−2 Var X_t)) dt by dense midpoint sum
    let s = v.base().schedule().clone();
    let n = 200_000;
    let oracle: f64 = (0..n)
        .map(|k| {
            let c = s.eval((k as f64 + 0.5) / n as f64).unwrap();
            let var = c.alpha.powi(2) + c.beta.powi(2) + c.gamma.powi(2);
            0.01 * 0.5 * (1.0 - (-2.0 * var).exp())
        })
        .sum::<f64>()
        / n as f64;
    assert!((e.epsilon_sq - oracle).abs() < 1e-9);
    assert!((e.mc_epsilon_sq - oracle).abs() < 3.0 * e.mc_std_error);
}

#[test]
fn epsilon_is_linear_in_amplitude() {
    let mut rng = stream(7, 0);
    let amps = [0.001, 0.01, 0.1];
    let eps: Vec<f64> = amps
        .iter()
        .map(|&c| l2_error(&perturbed(c, TimeProfile::Constant), 1000, &QuadratureSpec::default(), &mut rng).unwrap().epsilon)
        .collect();
    let slope = ((eps[2] / eps[0]).ln()) / ((amps[2] / amps[0]) as f64).ln();
    assert!((slope - 1.0).abs() < 0.02);
    assert!((eps[2] / eps[1] - 10.0).abs() < 1e-9);
}

#[test]
fn lipschitz_profile_of_gaussian_endpoints() {
    let v = perturbed(0.0, TimeProfile::Constant);
    let f = v.base().clone();
    let times = [0.1, 0.5, 0.9];
    let mut rng = stream(8, 0);
    let prof = lipschitz_profile(f.as_ref(), &times, &LipschitzProbes::default(), &mut rng).unwrap();
    for (k, &t) in times.iter().enumerate() {
        let c = f.coefficients(t).unwrap();
        let exact = (c.alpha * c.alpha_dot + c.beta * c.beta_dot + c.gamma * c.gamma_dot).abs()
            / (c.alpha.powi(2) + c.beta.powi(2) + c.gamma.powi(2));
        assert!((prof.l_hat[k] - exact).abs() < 1e-12);
    }
    let p = perturbed(0.2, TimeProfile::Constant);
    let prof2 = lipschitz_profile(&p, &times, &LipschitzProbes::default(), &mut rng).unwrap();
    for k in 0..3 {
        assert!((prof2.l_hat[k] - prof.l_hat[k] - 0.2).abs() < 1e-12);
    }
}

#[test]
fn objective_forms_differ_by_a_field_independent_constant() {
    let v = perturbed(0.3, TimeProfile::Constant);
    let base = v.base().clone();
    let mut rng = stream(9, 0);
    let same = objective_gap_check(&base, base.as_ref(), base.as_ref(), 1000, TimeSampling::Uniform, &mut rng).unwrap();
    assert_eq!(same.gap_direct, 0.0);
    assert_eq!(same.gap_regression, 0.0);
    let g = objective_gap_check(&base, base.as_ref(), &v, 20_000, TimeSampling::Uniform, &mut rng).unwrap();
    assert!(g.pass, "{g:?}");
    assert!(g.gap_regression < 0.0);
    let w = perturbed(0.3, TimeProfile::Window { start: 0.0, end: 0.5 });
    let late = objective_gap_check(&base, base.as_ref(), &w, 1000, TimeSampling::Fixed(0.75), &mut rng).unwrap();
    assert_eq!(late.gap_direct, 0.0);
    assert_eq!(late.gap_regression, 0.0);
}
