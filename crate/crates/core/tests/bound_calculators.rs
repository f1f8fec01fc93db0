use flowbound::bounds::{
    gamma_min_rule, kt_profile, minimize_theorem_3_9, relaxation_w2_bound, rhs_corollary_4_3, rhs_theorem_3_1,
    rhs_theorem_3_2, rhs_theorem_3_8, rhs_theorem_3_9, rhs_theorem_4_4, KtForm, PfodeVariant,
};
use flowbound::quadrature::QuadratureSpec;
use flowbound::schedules::{schedule_integrals, Schedule};
use proptest::prelude::*;

#[test]
fn pfode_values_are_exponentials_of_the_corollary() {
    for v in [PfodeVariant::Vp, PfodeVariant::Ve] {
        for &(eps, lam, g1) in &[(1e-3, 1.0, 0.01), (0.1, 3.0, 0.2)] {
            let direct = rhs_theorem_4_4(v, eps, lam, g1).unwrap();
            let via = rhs_theorem_3_1(eps, rhs_corollary_4_3(v, lam, g1).unwrap()).unwrap();
            assert!((direct - via).abs() <= 1e-12 * direct);
        }
    }
    // ε = 0.001, λ = 1, γ1 = 0.01 under VE gives 0.1
    let ve = rhs_theorem_4_4(PfodeVariant::Ve, 1e-3, 1.0, 0.01).unwrap();
    assert!((ve - 0.1).abs() < 1e-15);
}

#[test]
fn relaxation_reduces_to_noise_term_at_unit_coefficient() {
    assert_eq!(relaxation_w2_bound(1.0, 5.0, 4, 0.3), 2.0 * 0.3);
    assert!((relaxation_w2_bound(0.5, 2.0, 1, 0.0) - 1.0).abs() < 1e-15);
}

#[test]
fn grid_minimiser_tracks_the_rule() {
    for &d in &[1usize, 3, 10] {
        for &lam in &[1.0, 4.0] {
            let (g, _) = minimize_theorem_3_9(1e-3, lam, 1.0, 1.0, d, 4001).unwrap();
            let rule = gamma_min_rule(1e-3, d, lam);
            assert!(g / rule <= 2.0 && rule / g <= 2.0, "d {d} lambda {lam}: {g} vs {rule}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn right_hand_sides_are_monotone(
        eps in 1e-6f64..1.0,
        lam in 1.0f64..10.0,
        c in 1.0f64..5.0,
        gmin in 0.01f64..1.0,
        ratio in 1.0f64..10.0,
        bump in 1.0f64..2.0,
    ) {
        let gmax = gmin * ratio;
        let base = rhs_theorem_3_8(eps, lam, c, gmin, gmax).unwrap();
        prop_assert!(rhs_theorem_3_8(eps * bump, lam, c, gmin, gmax).unwrap() >= base);
        prop_assert!(rhs_theorem_3_8(eps, lam * bump, c, gmin, gmax).unwrap() >= base);
        prop_assert!(rhs_theorem_3_8(eps, lam, c * bump, gmin, gmax).unwrap() >= base);
        prop_assert!(rhs_theorem_3_8(eps, lam, c, gmin, gmax * bump).unwrap() >= base);
        prop_assert!(rhs_theorem_3_9(eps, lam, c, gmin, gmax, 2).unwrap() >= base);
        prop_assert!(rhs_theorem_3_1(eps, lam * bump).unwrap() >= rhs_theorem_3_1(eps, lam).unwrap());
        for v in [PfodeVariant::Vp, PfodeVariant::Ve] {
            let g1 = gmin.min(0.99);
            prop_assert!(rhs_theorem_4_4(v, eps, lam, g1 / bump).unwrap() >= rhs_theorem_4_4(v, eps, lam, g1).unwrap());
            prop_assert!(rhs_corollary_4_3(v, lam * bump, g1).unwrap() >= rhs_corollary_4_3(v, lam, g1).unwrap());
        }
    }

    #[test]
    fn envelope_chain_on_concave_schedules(
        r in 0.3f64..3.0,
        delta in 0.005f64..0.5,
        lam in 1.0f64..8.0,
        radius in 0.1f64..3.0,
        eps in 1e-4f64..0.1,
    ) {
        let spec = QuadratureSpec::default();
        let s = Schedule::generic_concave(r, delta).unwrap();
        let integral = kt_profile(lam, radius, &s, KtForm::Envelope).unwrap().integral(&spec).unwrap();
        let rhs32 = rhs_theorem_3_2(lam, radius, &s, &spec).unwrap();
        prop_assert!((integral - rhs32).abs() <= 1e-9 * rhs32);
        let ints = schedule_integrals(&s, radius, &spec).unwrap();
        let (gmin, gmax) = s.gamma_range();
        let via_k = rhs_theorem_3_1(eps, integral).unwrap();
        let closed = rhs_theorem_3_8(eps, lam, ints.c, gmin, gmax).unwrap();
        prop_assert!(via_k <= closed * (1.0 + 1e-8), "{} > {}", via_k, closed);
    }
}
