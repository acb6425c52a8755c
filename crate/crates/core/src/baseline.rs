//! Receding-horizon MPC on a linear model and Monte-Carlo return estimation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::diffqp::{solve, ActionPin, QpData, QpError, SoftConfig};
use crate::envs::{BoxBounds, Env};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("Riccati iteration did not converge (residual {0:.3e})")]
    RiccatiDiverged(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Stabilizing solution of `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` by the
/// structured doubling algorithm.
pub fn dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, BaselineError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let r_inv = r.clone().try_inverse().ok_or(BaselineError::RiccatiDiverged(f64::INFINITY))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    for _ in 0..100 {
        let w = (&eye + &gk * &hk).try_inverse().ok_or(BaselineError::RiccatiDiverged(f64::INFINITY))?;
        let aw = &ak * &w;
        let g_next = &gk + &aw * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let a_next = &aw * &ak;
        let delta = (&h_next - &hk).amax() / (1.0 + h_next.amax());
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= 1e-12 {
            let p = (&hk + hk.transpose()) * 0.5;
            let s = r + b.transpose() * &p * b;
            let gain = s
                .lu()
                .solve(&(b.transpose() * &p * a))
                .ok_or(BaselineError::RiccatiDiverged(f64::INFINITY))?;
            let resid = (q + a.transpose() * &p * a - a.transpose() * &p * b * gain - &p).amax();
            if resid > 1e-9 * (1.0 + p.amax()) {
                return Err(BaselineError::RiccatiDiverged(resid));
            }
            return Ok(p);
        }
    }
    Err(BaselineError::RiccatiDiverged(f64::NAN))
}

/// Horizon-N constrained LQ problem with unit stage weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: usize,
    /// Weight on the last predicted state.
    pub terminal: DMatrix<f64>,
    pub state_box: BoxBounds,
    pub input_box: BoxBounds,
}

/// First input and full plan of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    pub inputs: DVector<f64>,
    /// Predicted cost excluding the current stage's `‖x‖²`.
    pub cost: f64,
    pub slack: f64,
}

impl MpcProblem {
    /// MPC for the linear benchmark with the Riccati terminal weight.
    pub fn for_linear_env(env: &crate::envs::LinearEnv, horizon: usize) -> Result<Self, BaselineError> {
        let (n, m) = (env.a.nrows(), env.b.ncols());
        let terminal = dare(&env.a, &env.b, &DMatrix::identity(n, n), &DMatrix::identity(m, m))?;
        Ok(Self {
            a: env.a.clone(),
            b: env.b.clone(),
            horizon,
            terminal,
            state_box: env.terminate_outer.clone(),
            input_box: env.input_box.clone(),
        })
    }

    /// Condensed QP over the stacked inputs only; predicted states are
    /// eliminated as `S = Φx + ΓU`.
    fn condensed(&self, x: &DVector<f64>) -> QpData {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let h = self.horizon;
        let mut phi = DMatrix::zeros(h * n, n);
        let mut gamma = DMatrix::zeros(h * n, h * m);
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut powers = Vec::with_capacity(h);
        for t in 0..h {
            powers.push(power.clone());
            power = &self.a * power;
            phi.view_mut((t * n, 0), (n, n)).copy_from(&power);
        }
        for t in 0..h {
            for k in 0..=t {
                gamma
                    .view_mut((t * n, k * m), (n, m))
                    .copy_from(&(&powers[t - k] * &self.b));
            }
        }
        let mut w = DMatrix::<f64>::identity(h * n, h * n);
        w.view_mut(((h - 1) * n, (h - 1) * n), (n, n)).copy_from(&self.terminal);

        let gw = gamma.transpose() * &w;
        let hess = (&gw * &gamma + DMatrix::identity(h * m, h * m)) * -2.0;
        let q_vec = &gw * &phi * x * -2.0;

        let m_in = 2 * h * n + 2 * h * m;
        let mut c_in = DMatrix::zeros(m_in, n);
        let mut d_in = DMatrix::zeros(m_in, h * m);
        let mut rhs_in = DVector::zeros(m_in);
        for i in 0..h * n {
            let (lo, hi) = (self.state_box.low[i % n], self.state_box.high[i % n]);
            c_in.row_mut(2 * i).copy_from(&phi.row(i));
            d_in.row_mut(2 * i).copy_from(&gamma.row(i));
            rhs_in[2 * i] = hi;
            c_in.row_mut(2 * i + 1).copy_from(&(-phi.row(i)));
            d_in.row_mut(2 * i + 1).copy_from(&(-gamma.row(i)));
            rhs_in[2 * i + 1] = -lo;
        }
        for j in 0..h * m {
            let r = 2 * h * n + 2 * j;
            d_in[(r, j)] = 1.0;
            rhs_in[r] = self.input_box.high[j % m];
            d_in[(r + 1, j)] = -1.0;
            rhs_in[r + 1] = -self.input_box.low[j % m];
        }
        QpData {
            q_mat: (&hess + hess.transpose()) * 0.5,
            q_vec,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DMatrix::zeros(0, h * m),
            rhs_eq: DVector::zeros(0),
            c_in,
            d_in,
            rhs_in,
        }
    }

    /// Solves the horizon problem from `x`, optionally with the first input
    /// forced. Falls back to the softened problem when the hard one is
    /// infeasible.
    pub fn plan(&self, x: &DVector<f64>, first_input: Option<&DVector<f64>>) -> Result<MpcPlan, BaselineError> {
        let qp = self.condensed(x);
        let m = self.b.ncols();
        let pin = first_input.map(|u| {
            let mut k = DMatrix::zeros(m, qp.n_mu());
            k.view_mut((0, 0), (m, m)).fill_diagonal(1.0);
            ActionPin { k, u: u.clone() }
        });
        let sol = match solve(&qp, x, pin.as_ref(), None) {
            Ok(s) => s,
            Err(QpError::Infeasible) => solve(&qp, x, pin.as_ref(), Some(&SoftConfig::default()))?,
            Err(e) => return Err(e.into()),
        };
        // value = −(cost − xᵀΦᵀWΦx); add back the constant part
        let constant = self.constant_cost(x);
        Ok(MpcPlan {
            cost: constant - sol.value,
            slack: sol.max_slack(),
            inputs: sol.mu_star,
        })
    }

    fn constant_cost(&self, x: &DVector<f64>) -> f64 {
        let mut s = x.clone();
        let mut c = 0.0;
        for t in 1..=self.horizon {
            s = &self.a * s;
            c += if t == self.horizon {
                s.dot(&(&self.terminal * &s))
            } else {
                s.norm_squared()
            };
        }
        c
    }
}

/// First input of the horizon-N plan from `x`.
pub fn mpc_policy(p: &MpcProblem, x: &DVector<f64>) -> Result<DVector<f64>, BaselineError> {
    let plan = p.plan(x, None)?;
    let m = p.b.ncols();
    Ok(plan.inputs.rows(0, m).into_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub per_rollout: Vec<(DVector<f64>, f64)>,
}

impl ReturnEstimate {
    pub fn from_returns(per_rollout: Vec<(DVector<f64>, f64)>) -> Self {
        let n = per_rollout.len() as f64;
        let mean = per_rollout.iter().map(|r| r.1).sum::<f64>() / n;
        let std_error = if per_rollout.len() > 1 {
            let var = per_rollout.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            per_rollout,
        }
    }
}

/// Discounted return of one rollout from `x0`.
pub fn rollout_return<E>(
    env: &Env,
    policy: &mut impl FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    x0: &DVector<f64>,
    gamma: f64,
    t_max: usize,
) -> Result<f64, E> {
    let mut x = x0.clone();
    let mut ret = 0.0;
    let mut discount = 1.0;
    if env.is_terminal(&x) {
        return Ok(0.0);
    }
    for _ in 0..t_max {
        let u = policy(&x)?;
        let step = env.step(&x, &u);
        ret += discount * step.reward;
        discount *= gamma;
        x = step.next_state;
        if step.done {
            break;
        }
    }
    Ok(ret)
}

/// Returns from the given initial states, in order.
pub fn mc_return_from<E>(
    env: &Env,
    mut policy: impl FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    initial_states: &[DVector<f64>],
    gamma: f64,
    t_max: usize,
) -> Result<ReturnEstimate, E> {
    let mut per = Vec::with_capacity(initial_states.len());
    for x0 in initial_states {
        per.push((x0.clone(), rollout_return(env, &mut policy, x0, gamma, t_max)?));
    }
    Ok(ReturnEstimate::from_returns(per))
}

/// Monte-Carlo estimate over `n_rollouts` initial states drawn from
/// `env.reset`; two policies evaluated with equally seeded `rng`s see the
/// same initial states.
pub fn mc_return<E>(
    env: &Env,
    policy: impl FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    n_rollouts: usize,
    rng: &mut impl Rng,
    gamma: f64,
    t_max: usize,
) -> Result<ReturnEstimate, E> {
    assert!(n_rollouts >= 1, "need at least one rollout");
    let states: Vec<_> = (0..n_rollouts).map(|_| env.reset(rng)).collect();
    mc_return_from(env, policy, &states, gamma, t_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::LinearEnv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn problem(horizon: usize, terminal_identity: bool) -> MpcProblem {
        let mut p = MpcProblem::for_linear_env(&LinearEnv::default(), horizon).unwrap();
        if terminal_identity {
            p.terminal = DMatrix::identity(2, 2);
        }
        p
    }

    #[test]
    fn dare_scalar_closed_form() {
        // a = 2, b = 1, q = r = 1: p² − 4p − 1 = 0
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = dare(&DMatrix::from_element(1, 1, 2.0), &one, &one, &one).unwrap();
        assert!((p[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn origin_gives_zero_input() {
        let u = mpc_policy(&problem(10, false), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn one_step_closed_form() {
        let env = LinearEnv::default();
        let x = v(&[0.5, 0.0]);
        let bb = (env.b.transpose() * &env.b)[(0, 0)] + 1.0;
        let expected = -(env.b.transpose() * &env.a * &x)[(0, 0)] / bb;
        let u = mpc_policy(&problem(1, true), &x).unwrap();
        assert!((u[0] - expected).abs() < 1e-12);
        assert!((u[0] + 0.352_234_677).abs() < 1e-8);
    }

    #[test]
    fn plan_cost_matches_simulation() {
        let p = problem(10, false);
        let x = v(&[1.2, -0.7]);
        let plan = p.plan(&x, None).unwrap();
        let mut s = x.clone();
        let mut cost = 0.0;
        for t in 0..10 {
            let u = plan.inputs.rows(t, 1).into_owned();
            cost += u.norm_squared();
            s = &p.a * s + &p.b * u;
            cost += if t == 9 { s.dot(&(&p.terminal * &s)) } else { s.norm_squared() };
        }
        assert!((cost - plan.cost).abs() < 1e-9 * cost);
    }

    #[test]
    fn pinned_plan_costs_more() {
        let p = problem(10, false);
        let x = v(&[0.5, 0.0]);
        let free = p.plan(&x, None).unwrap();
        let pinned = p.plan(&x, Some(&v(&[0.0]))).unwrap();
        assert!(pinned.inputs[0].abs() < 1e-12);
        assert!(pinned.cost > free.cost);
    }

    #[test]
    fn zero_policy_at_origin_returns_zero() {
        let env = Env::linear();
        let est = mc_return_from(
            &env,
            |_: &DVector<f64>| Ok::<_, Infallible>(v(&[0.0])),
            &[v(&[0.0, 0.0])],
            1.0,
            100,
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn single_rollout_replays() {
        let env = Env::linear();
        let policy = |x: &DVector<f64>| Ok::<_, Infallible>(v(&[-0.3 * x[0]]));
        let est = mc_return(&env, policy, 1, &mut ChaCha8Rng::seed_from_u64(4), 1.0, 30).unwrap();
        let mut x = env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        let mut total = 0.0;
        for _ in 0..30 {
            let u = v(&[-0.3 * x[0]]);
            let s = env.step(&x, &u);
            total += s.reward;
            x = s.next_state;
            if s.done {
                break;
            }
        }
        assert_eq!(est.mean, total);
    }

    #[test]
    fn paired_seeds_share_initial_states() {
        let env = Env::linear();
        let a = mc_return(&env, |_: &DVector<f64>| Ok::<_, Infallible>(v(&[0.0])), 5, &mut ChaCha8Rng::seed_from_u64(9), 1.0, 5).unwrap();
        let b = mc_return(&env, |_: &DVector<f64>| Ok::<_, Infallible>(v(&[1.0])), 5, &mut ChaCha8Rng::seed_from_u64(9), 1.0, 5).unwrap();
        for (ra, rb) in a.per_rollout.iter().zip(&b.per_rollout) {
            assert_eq!(ra.0, rb.0);
        }
    }

    #[test]
    fn standard_error_formula() {
        let est = ReturnEstimate::from_returns(vec![(v(&[0.0]), 1.0), (v(&[0.0]), 3.0)]);
        assert_eq!(est.mean, 2.0);
        assert!((est.std_error - 1.0).abs() < 1e-15);
    }
}
