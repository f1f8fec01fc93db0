#![allow(dead_code)]

use flowbound::mixtures::{Covariance, GaussianMixture};
use flowbound::schedules::{Profile, Schedule};
use flowbound::velocity::ExactVelocityField;
use nalgebra::{dvector, DMatrix, DVector};

/// Named mixture-endpoint instances shared by the integration tests.
pub fn instances() -> Vec<(&'static str, ExactVelocityField)> {
    let concave = Schedule::generic_concave(2.0, 0.05).unwrap();
    let mut out = Vec::new();

    let pi1 = GaussianMixture::new(
        vec![0.3, 0.7],
        vec![dvector![-1.5], dvector![1.0]],
        vec![Covariance::Isotropic(0.16), Covariance::Isotropic(0.36)],
    )
    .unwrap();
    out.push((
        "d1-bimodal",
        ExactVelocityField::new(GaussianMixture::standard(1), pi1, concave.clone()).unwrap(),
    ));

    let pi0 = GaussianMixture::isotropic(vec![0.5, 0.5], vec![dvector![-1.0, 0.0], dvector![1.0, 0.5]], 0.7).unwrap();
    let pi1 = GaussianMixture::isotropic(
        vec![0.2, 0.3, 0.5],
        vec![dvector![0.0, 1.5], dvector![1.2, -1.0], dvector![-1.3, -0.4]],
        0.45,
    )
    .unwrap();
    out.push(("d2-iso", ExactVelocityField::new(pi0, pi1, concave.clone()).unwrap()));

    let full = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]);
    let pi1 = GaussianMixture::new(
        vec![0.6, 0.4],
        vec![dvector![1.0, 1.0], dvector![-1.0, 0.5]],
        vec![Covariance::Full(full), Covariance::Isotropic(0.25)],
    )
    .unwrap();
    out.push((
        "d2-full",
        ExactVelocityField::new(GaussianMixture::standard(2), pi1, concave.clone()).unwrap(),
    ));

    let means: Vec<DVector<f64>> = (0..4)
        .map(|k| {
            let mut m = DVector::zeros(4);
            m[k] = if k % 2 == 0 { 1.5 } else { -1.5 };
            m
        })
        .collect();
    let pi1 = GaussianMixture::isotropic(vec![0.25; 4], means, 0.5).unwrap();
    out.push((
        "d4-axes",
        ExactVelocityField::new(GaussianMixture::standard(4), pi1, concave).unwrap(),
    ));

    let custom = Schedule::custom(
        Profile::Linear { start: 1.0, end: 0.0 },
        Profile::Power { scale: 1.0, exponent: 2.0 },
        Profile::ConcaveArc { scale: 1.0, delta: 0.1 },
    )
    .unwrap();
    let pi0 = GaussianMixture::isotropic(vec![0.4, 0.6], vec![dvector![0.5, 0.0, -0.5, 0.0], dvector![0.0, -0.5, 0.0, 0.5]], 0.8).unwrap();
    let pi1 = GaussianMixture::isotropic(vec![0.5, 0.5], vec![dvector![1.0, 1.0, 0.0, 0.0], dvector![0.0, 0.0, -1.0, -1.0]], 0.6).unwrap();
    out.push(("d4-custom", ExactVelocityField::new(pi0, pi1, custom).unwrap()));
    out
}

/// Frobenius-norm relative difference with a small absolute floor.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-3)
}
