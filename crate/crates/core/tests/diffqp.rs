mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use unirl::diffqp::{backward, kkt_residual, solve, ActionPin, QpData, SoftConfig};

#[test]
fn matches_enumeration_oracle() {
    let mut rng = rng(11);
    for _ in 0..150 {
        let (qp, z, orc) = random_nondegenerate_qp(&mut rng, 6, 8, 3);
        let sol = solve(&qp, &z, None, None).unwrap();
        assert!((sol.value - orc.value).abs() <= 1e-6);
        assert!((&sol.mu_star - &orc.mu).amax() <= 1e-6);
        assert_eq!(sol.active_set, orc.active);
        assert!(kkt_residual(&qp, &z, None, None, &sol) <= 1e-8);
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = rng(12);
    let h = 1e-6;
    for _ in 0..30 {
        let (qp, z, _) = random_nondegenerate_qp(&mut rng, 5, 6, 2);
        let sol = solve(&qp, &z, None, None).unwrap();
        let g_mu = randn_vec(&mut rng, qp.n_mu(), 1.0);
        let g_v = randn_vec(&mut rng, 1, 1.0)[0];
        let grads = backward(&qp, &z, None, None, &sol, &g_mu, g_v).unwrap();
        let loss = |qp: &QpData, z: &DVector<f64>| {
            let s = solve(qp, z, None, None).unwrap();
            g_mu.dot(&s.mu_star) + g_v * s.value
        };
        for slot in all_slots(&qp) {
            let (qp_p, z_p) = perturb(&qp, &z, slot, h);
            let (qp_m, z_m) = perturb(&qp, &z, slot, -h);
            let fd = (loss(&qp_p, &z_p) - loss(&qp_m, &z_m)) / (2.0 * h);
            let an = analytic(&grads, slot);
            assert!(rel_close(an, fd, 1e-4, 1e-7), "{slot:?}: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn envelope_identities() {
    let mut rng = rng(13);
    for _ in 0..50 {
        let (qp, z, _) = random_nondegenerate_qp(&mut rng, 5, 6, 2);
        let sol = solve(&qp, &z, None, None).unwrap();
        let g = backward(&qp, &z, None, None, &sol, &DVector::zeros(qp.n_mu()), 1.0).unwrap();
        assert_eq!(g.q_vec, sol.mu_star);
        assert_eq!(g.rhs_in, sol.lambda_star);
        assert_eq!(g.rhs_eq, sol.nu_star.rows(0, qp.m_eq()).into_owned());
        let half_outer = &sol.mu_star * sol.mu_star.transpose() * 0.5;
        assert!((g.q_mat - half_outer).amax() < 1e-15);
    }
}

#[test]
fn softened_gradients_match_finite_differences() {
    // infeasible pair of rows forces nonzero slack
    let mut qp = QpData::unconstrained(
        DMatrix::from_row_slice(2, 2, &[-2.0, 0.4, 0.4, -1.0]),
        DVector::from_vec(vec![0.3, -0.2]),
        1,
    );
    qp.c_in = DMatrix::from_row_slice(3, 1, &[0.5, -0.3, 0.1]);
    qp.d_in = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.2, 1.0]);
    qp.rhs_in = DVector::from_vec(vec![-1.0, -1.0, 0.05]);
    let z = DVector::from_element(1, 0.4);
    let soft = SoftConfig {
        rho_lin: 2.0,
        rho_quad: 0.5,
        soften_equalities: false,
    };
    let sol = solve(&qp, &z, None, Some(&soft)).unwrap();
    assert!(sol.max_slack() > 0.1);
    assert!(kkt_residual(&qp, &z, None, Some(&soft), &sol) <= 1e-8);
    let g_mu = DVector::from_vec(vec![0.7, -1.3]);
    let g_v = 0.4;
    let grads = backward(&qp, &z, None, Some(&soft), &sol, &g_mu, g_v).unwrap();
    let h = 1e-6;
    let loss = |qp: &QpData, z: &DVector<f64>| {
        let s = solve(qp, z, None, Some(&soft)).unwrap();
        g_mu.dot(&s.mu_star) + g_v * s.value
    };
    for slot in all_slots(&qp) {
        let (qp_p, z_p) = perturb(&qp, &z, slot, h);
        let (qp_m, z_m) = perturb(&qp, &z, slot, -h);
        let fd = (loss(&qp_p, &z_p) - loss(&qp_m, &z_m)) / (2.0 * h);
        let an = analytic(&grads, slot);
        assert!(rel_close(an, fd, 1e-4, 1e-7), "{slot:?}: analytic {an} vs fd {fd}");
    }
}

#[test]
fn pinned_gradient_wrt_action() {
    let qp = QpData::unconstrained(
        DMatrix::from_row_slice(2, 2, &[-1.5, 0.2, 0.2, -1.0]),
        DVector::from_vec(vec![0.3, 0.1]),
        0,
    );
    let z = DVector::zeros(0);
    let k = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let value_at = |u: f64| {
        let pin = ActionPin {
            k: k.clone(),
            u: DVector::from_element(1, u),
        };
        solve(&qp, &z, Some(&pin), None).unwrap().value
    };
    let pin = ActionPin {
        k: k.clone(),
        u: DVector::from_element(1, 0.25),
    };
    let sol = solve(&qp, &z, Some(&pin), None).unwrap();
    let g = backward(&qp, &z, Some(&pin), None, &sol, &DVector::zeros(2), 1.0).unwrap();
    let fd = central_diff(value_at, 0.25, 1e-6);
    assert!(rel_close(g.pin_u.unwrap()[0], fd, 1e-6, 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softened_solve_equals_hard_solve_on_feasible_problems(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let (qp, z, _) = random_nondegenerate_qp(&mut rng, 5, 6, 2);
        let hard = solve(&qp, &z, None, None).unwrap();
        let soft = solve(&qp, &z, None, Some(&SoftConfig::default())).unwrap();
        prop_assume!(hard.lambda_star.amax() < SoftConfig::default().rho_lin);
        prop_assert!((&hard.mu_star - &soft.mu_star).amax() <= 1e-8);
        prop_assert!((hard.value - soft.value).abs() <= 1e-8);
        prop_assert_eq!(soft.max_slack(), 0.0);
    }

    #[test]
    fn solve_is_deterministic(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let (qp, z) = random_qp(&mut rng, 4, 5, 1, 2);
        let a = solve(&qp, &z, None, Some(&SoftConfig::default())).unwrap();
        let b = solve(&qp, &z, None, Some(&SoftConfig::default())).unwrap();
        prop_assert_eq!(a.mu_star.as_slice(), b.mu_star.as_slice());
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}
