mod common;

use std::convert::Infallible;

use common::rng;
use nalgebra::{DMatrix, DVector};
use unirl::baseline::{dare, mc_return, mc_return_from, mpc_policy, MpcProblem};
use unirl::envs::{Env, LinearEnv};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

#[test]
fn riccati_solution_matches_reference_values() {
    let env = LinearEnv::default();
    let p = dare(&env.a, &env.b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
    // reference from an independent generalized-eigenvalue DARE solver
    let expected = DMatrix::from_row_slice(2, 2, &[2.35392, 0.06040, 0.06040, 1.16050]);
    assert!((&p - expected).amax() < 5e-5, "{p}");
}

#[test]
fn horizon_one_closed_form() {
    let env = LinearEnv::default();
    let mpc = MpcProblem {
        a: env.a.clone(),
        b: env.b.clone(),
        horizon: 1,
        terminal: DMatrix::identity(2, 2),
        state_box: env.terminate_outer.clone(),
        input_box: env.input_box.clone(),
    };
    let x = v(&[0.5, 0.0]);
    let bta = env.b.transpose() * &env.a;
    let btb = env.b.transpose() * &env.b;
    let expected = -(btb + DMatrix::identity(1, 1)).try_inverse().unwrap() * bta * &x;
    let u = mpc_policy(&mpc, &x).unwrap();
    assert!((u[0] - expected[0]).abs() < 1e-9);
    assert!((u[0] + 0.352234677).abs() < 1e-8);
}

#[test]
fn mpc_stabilizes_from_random_states() {
    let env = LinearEnv::default();
    let mpc = MpcProblem::for_linear_env(&env, 10).unwrap();
    let e = Env::Linear(env);
    let mut r = rng(40);
    for _ in 0..100 {
        let mut x = e.reset(&mut r);
        let mut reached = e.is_terminal(&x);
        for _ in 0..50 {
            if reached {
                break;
            }
            let s = e.step(&x, &mpc_policy(&mpc, &x).unwrap());
            x = s.next_state;
            reached = s.done;
        }
        assert!(reached && x.amax() <= 0.1, "ended at {x}");
    }
}

#[test]
fn zero_policy_from_origin_returns_zero() {
    let env = Env::linear();
    let est = mc_return_from(&env, |_: &DVector<f64>| Ok::<_, Infallible>(v(&[0.0])), &[v(&[0.0, 0.0])], 1.0, 100).unwrap();
    assert_eq!(est.mean, 0.0);
}

#[test]
fn single_rollout_equals_replayed_rewards() {
    let env = Env::linear();
    let policy = |x: &DVector<f64>| Ok::<_, Infallible>(v(&[(-0.8 * x[0]).clamp(-1.0, 1.0)]));
    let est = mc_return(&env, policy, 1, &mut rng(41), 1.0, 30).unwrap();
    let mut x = env.reset(&mut rng(41));
    let mut total = 0.0;
    for _ in 0..30 {
        let u = v(&[(-0.8 * x[0]).clamp(-1.0, 1.0)]);
        total += -(x.norm_squared() + u.norm_squared());
        x = env.step(&x, &u).next_state;
        if env.is_terminal(&x) {
            break;
        }
    }
    assert_eq!(est.per_rollout[0].0, env.reset(&mut rng(41)));
    assert!((est.mean - total).abs() < 1e-12);
}

#[test]
fn standard_error_shrinks_with_more_rollouts() {
    let env = Env::linear();
    let policy = |x: &DVector<f64>| Ok::<_, Infallible>(v(&[(-0.5 * x[0] - 0.2 * x[1]).clamp(-1.0, 1.0)]));
    let small = mc_return(&env, policy, 400, &mut rng(42), 1.0, 100).unwrap();
    let large = mc_return(&env, policy, 1600, &mut rng(43), 1.0, 100).unwrap();
    let ratio = small.std_error.powi(2) / large.std_error.powi(2);
    assert!((2.5..6.0).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn paired_estimates_share_initial_states() {
    let env = Env::linear();
    let a = mc_return(&env, |_: &DVector<f64>| Ok::<_, Infallible>(v(&[0.0])), 5, &mut rng(44), 1.0, 10).unwrap();
    let b = mc_return(&env, |_: &DVector<f64>| Ok::<_, Infallible>(v(&[0.3])), 5, &mut rng(44), 1.0, 10).unwrap();
    for (p, q) in a.per_rollout.iter().zip(&b.per_rollout) {
        assert_eq!(p.0, q.0);
    }
}
