//! One parameter set θ that defines a value function, a Q-function and a
//! policy through a single parametric QP:
//!
//! ```text
//! V(x)   = max_μ ½μᵀQμ + qᵀμ   s.t.  A·z + B·μ = b,  C·z + D·μ ≤ d,  z = f_β(x)
//! Q(x,u) = the same maximum with the extra constraint K·μ = u
//! π(x)   = K·argmax
//! ```
//!
//! with `Q = −(MᵀM + 1e-6·I)` so that any update to `M` keeps the problem
//! concave. A Gaussian head `u = π(x) + L·ε` gives the stochastic policy.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffqp::{backward, solve, ActionPin, QpData, QpError, QpSolution, SoftConfig};
use crate::envs::BoxBounds;
use crate::lifting::{lift, lift_backward, LiftingNet, MpcLifting};

pub const Q_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedParams {
    pub m_factor: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DMatrix<f64>,
    pub rhs_eq: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub d_in: DMatrix<f64>,
    pub rhs_in: DVector<f64>,
    pub lifting: LiftingNet,
    /// Never trained.
    pub k: DMatrix<f64>,
    /// Unconstrained lower-triangular factor; the noise factor `L` uses
    /// `sigma_min + softplus(·)` on its diagonal.
    pub noise_raw: DMatrix<f64>,
    pub sigma_min: f64,
    pub soft: SoftConfig,
}

/// Flat gradient (or step) with the layout of [`UnifiedParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad(pub Vec<f64>);

impl ThetaGrad {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &ThetaGrad, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    /// Rescales to norm `max_norm` if longer; returns the original norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// A drawn action with everything needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub u: DVector<f64>,
    pub mean: DVector<f64>,
    pub log_prob: f64,
    pub epsilon: DVector<f64>,
}

/// One solved QP together with the data it was solved for.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub z: DVector<f64>,
    pub qp: QpData,
    pub pin: Option<ActionPin>,
    pub sol: QpSolution,
}

impl Evaluation {
    pub fn value(&self) -> f64 {
        self.sol.value
    }
}

/// Closed-form Gaussian log-density of `u` with mean `mean` and covariance
/// `L·Lᵀ` for lower-triangular `L`.
pub fn gaussian_log_density(u: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let eps = l
        .solve_lower_triangular(&(u - mean))
        .expect("noise factor has a positive diagonal");
    let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * eps.norm_squared() - logdet - 0.5 * u.len() as f64 * (2.0 * PI).ln()
}

impl UnifiedParams {
    /// θ reproducing an MPC lifting exactly (`MᵀM + 1e-6·I = −Q`).
    pub fn from_mpc(l: &MpcLifting, sigma_init: f64, sigma_min: f64, soft: SoftConfig) -> Self {
        let n = l.qp.n_mu();
        let target = -&l.qp.q_mat - DMatrix::identity(n, n) * Q_FLOOR;
        let chol = target.cholesky().expect("MPC objective is negative definite");
        let m_factor = chol.l().transpose();
        let m_u = l.k.nrows();
        Self {
            m_factor,
            q_vec: l.qp.q_vec.clone(),
            a_eq: l.qp.a_eq.clone(),
            b_eq: l.qp.b_eq.clone(),
            rhs_eq: l.qp.rhs_eq.clone(),
            c_in: l.qp.c_in.clone(),
            d_in: l.qp.d_in.clone(),
            rhs_in: l.qp.rhs_in.clone(),
            lifting: l.net.clone(),
            k: l.k.clone(),
            noise_raw: Self::noise_raw_for(m_u, sigma_init, sigma_min),
            sigma_min,
            soft,
        }
    }

    /// θ with a given lifting and random QP data. `K` selects the first
    /// `m_u` coordinates of μ, and the inequality rows hold `K·μ` inside
    /// `input_box`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        lifting: LiftingNet,
        n_mu: usize,
        m_eq: usize,
        input_box: &BoxBounds,
        scale: f64,
        sigma_init: f64,
        sigma_min: f64,
        soft: SoftConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let m_u = input_box.dim();
        assert!(n_mu > m_eq && n_mu >= m_u, "too few decision variables");
        let n_z = lifting.n_z();
        let mut randn = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let m_factor = DMatrix::identity(n_mu, n_mu) + randn(n_mu, n_mu);
        let q_vec = randn(n_mu, 1).column(0).into_owned();
        let a_eq = randn(m_eq, n_z);
        let b_eq = randn(m_eq, n_mu);
        let rhs_eq = randn(m_eq, 1).column(0).into_owned();
        let mut k = DMatrix::zeros(m_u, n_mu);
        k.view_mut((0, 0), (m_u, m_u)).fill_diagonal(1.0);
        let mut d_in = DMatrix::zeros(2 * m_u, n_mu);
        d_in.view_mut((0, 0), (m_u, n_mu)).copy_from(&k);
        d_in.view_mut((m_u, 0), (m_u, n_mu)).copy_from(&(-&k));
        let mut rhs_in = DVector::zeros(2 * m_u);
        rhs_in.rows_mut(0, m_u).copy_from(&input_box.high);
        rhs_in.rows_mut(m_u, m_u).copy_from(&(-&input_box.low));
        Self {
            m_factor,
            q_vec,
            a_eq,
            b_eq,
            rhs_eq,
            c_in: DMatrix::zeros(2 * m_u, n_z),
            d_in,
            rhs_in,
            lifting,
            k,
            noise_raw: Self::noise_raw_for(m_u, sigma_init, sigma_min),
            sigma_min,
            soft,
        }
    }

    fn noise_raw_for(m_u: usize, sigma_init: f64, sigma_min: f64) -> DMatrix<f64> {
        assert!(sigma_init > sigma_min, "initial noise must exceed its floor");
        DMatrix::from_diagonal_element(m_u, m_u, softplus_inv(sigma_init - sigma_min))
    }

    pub fn n_mu(&self) -> usize {
        self.m_factor.ncols()
    }

    pub fn m_u(&self) -> usize {
        self.k.nrows()
    }

    pub fn q_mat(&self) -> DMatrix<f64> {
        let n = self.n_mu();
        -(self.m_factor.tr_mul(&self.m_factor) + DMatrix::identity(n, n) * Q_FLOOR)
    }

    pub fn qp_data(&self) -> QpData {
        QpData {
            q_mat: self.q_mat(),
            q_vec: self.q_vec.clone(),
            a_eq: self.a_eq.clone(),
            b_eq: self.b_eq.clone(),
            rhs_eq: self.rhs_eq.clone(),
            c_in: self.c_in.clone(),
            d_in: self.d_in.clone(),
            rhs_in: self.rhs_in.clone(),
        }
    }

    /// Lower-triangular noise factor `L` with `Σ = L·Lᵀ`.
    pub fn noise_factor(&self) -> DMatrix<f64> {
        let m = self.m_u();
        DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => self.sigma_min + softplus(self.noise_raw[(i, i)]),
            std::cmp::Ordering::Greater => self.noise_raw[(i, j)],
        })
    }

    pub fn is_negative_definite(&self) -> bool {
        (-self.q_mat()).cholesky().is_some()
    }

    pub fn n_params(&self) -> usize {
        let m = self.m_u();
        self.m_factor.len()
            + self.q_vec.len()
            + self.a_eq.len()
            + self.b_eq.len()
            + self.rhs_eq.len()
            + self.c_in.len()
            + self.d_in.len()
            + self.rhs_in.len()
            + self.lifting.n_params()
            + m * (m + 1) / 2
    }

    /// All trainable entries in a fixed order: `M`, `q`, `A`, `B`, `b`, `C`,
    /// `D`, `d` (column-major), the lifting, then the lower triangle of the
    /// raw noise factor row by row.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for s in [
            self.m_factor.as_slice(),
            self.q_vec.as_slice(),
            self.a_eq.as_slice(),
            self.b_eq.as_slice(),
            self.rhs_eq.as_slice(),
            self.c_in.as_slice(),
            self.d_in.as_slice(),
            self.rhs_in.as_slice(),
        ] {
            v.extend_from_slice(s);
        }
        v.extend(self.lifting.params());
        let m = self.m_u();
        for i in 0..m {
            for j in 0..=i {
                v.push(self.noise_raw[(i, j)]);
            }
        }
        v
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "flat parameter length");
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.m_factor.as_mut_slice());
        take(self.q_vec.as_mut_slice());
        take(self.a_eq.as_mut_slice());
        take(self.b_eq.as_mut_slice());
        take(self.rhs_eq.as_mut_slice());
        take(self.c_in.as_mut_slice());
        take(self.d_in.as_mut_slice());
        take(self.rhs_in.as_mut_slice());
        let mut net = vec![0.0; self.lifting.n_params()];
        take(&mut net);
        self.lifting.set_params(&net);
        let m = self.m_u();
        for i in 0..m {
            for j in 0..=i {
                let mut one = [0.0];
                take(&mut one);
                self.noise_raw[(i, j)] = one[0];
            }
        }
    }

    /// `θ ← θ + step·g`.
    pub fn apply(&mut self, g: &ThetaGrad, step: f64) {
        let mut p = self.to_flat();
        for (a, b) in p.iter_mut().zip(&g.0) {
            *a += step * b;
        }
        self.set_flat(&p);
    }

    pub fn evaluate(&self, x: &DVector<f64>, pin_u: Option<&DVector<f64>>) -> Result<Evaluation, QpError> {
        let z = lift(&self.lifting, x);
        let qp = self.qp_data();
        let pin = pin_u.map(|u| ActionPin {
            k: self.k.clone(),
            u: u.clone(),
        });
        let sol = solve(&qp, &z, pin.as_ref(), Some(&self.soft))?;
        Ok(Evaluation { z, qp, pin, sol })
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<(f64, Evaluation), QpError> {
        let ev = self.evaluate(x, None)?;
        Ok((ev.value(), ev))
    }

    pub fn q_value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(f64, Evaluation), QpError> {
        let ev = self.evaluate(x, Some(u))?;
        Ok((ev.value(), ev))
    }

    pub fn policy(&self, x: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        let ev = self.evaluate(x, None)?;
        Ok(&self.k * &ev.sol.mu_star)
    }

    pub fn advantage(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, QpError> {
        Ok(self.q_value(x, u)?.0 - self.value(x)?.0)
    }

    pub fn log_prob(&self, u: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        gaussian_log_density(u, mean, &self.noise_factor())
    }

    /// `u = π(x) + L·ε` for a given ε.
    pub fn sample_with_epsilon(&self, x: &DVector<f64>, epsilon: &DVector<f64>) -> Result<PolicySample, QpError> {
        let mean = self.policy(x)?;
        let l = self.noise_factor();
        let u = &mean + &l * epsilon;
        let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        let log_prob = -0.5 * epsilon.norm_squared() - logdet - 0.5 * u.len() as f64 * (2.0 * PI).ln();
        Ok(PolicySample {
            u,
            mean,
            log_prob,
            epsilon: epsilon.clone(),
        })
    }

    pub fn sample_action(&self, x: &DVector<f64>, rng: &mut impl Rng) -> Result<PolicySample, QpError> {
        let eps = DVector::from_fn(self.m_u(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.sample_with_epsilon(x, &eps)
    }

    /// θ-gradient of `upstream_muᵀμ* + upstream_value·value` for a solved
    /// evaluation at `x`.
    pub fn chain(
        &self,
        x: &DVector<f64>,
        ev: &Evaluation,
        upstream_mu: &DVector<f64>,
        upstream_value: f64,
    ) -> Result<ThetaGrad, QpError> {
        let g = backward(&ev.qp, &ev.z, ev.pin.as_ref(), Some(&self.soft), &ev.sol, upstream_mu, upstream_value)?;
        let d_m = &self.m_factor * &g.q_mat * -2.0;
        let (d_net, _) = lift_backward(&self.lifting, x, &g.z);
        let mut v = Vec::with_capacity(self.n_params());
        for s in [
            d_m.as_slice(),
            g.q_vec.as_slice(),
            g.a_eq.as_slice(),
            g.b_eq.as_slice(),
            g.rhs_eq.as_slice(),
            g.c_in.as_slice(),
            g.d_in.as_slice(),
            g.rhs_in.as_slice(),
        ] {
            v.extend_from_slice(s);
        }
        v.extend(d_net.flatten());
        let m = self.m_u();
        v.extend(std::iter::repeat_n(0.0, m * (m + 1) / 2));
        Ok(ThetaGrad(v))
    }

    /// θ-gradient of `upstream·V(x)`.
    pub fn grad_value(&self, x: &DVector<f64>, upstream: f64) -> Result<ThetaGrad, QpError> {
        let ev = self.evaluate(x, None)?;
        self.chain(x, &ev, &DVector::zeros(self.n_mu()), upstream)
    }

    /// θ-gradient of `upstream·Q(x, u)` with `u` held fixed.
    pub fn grad_q_value(&self, x: &DVector<f64>, u: &DVector<f64>, upstream: f64) -> Result<ThetaGrad, QpError> {
        let ev = self.evaluate(x, Some(u))?;
        self.chain(x, &ev, &DVector::zeros(self.n_mu()), upstream)
    }

    /// θ-gradient of `scale·log π(u | x)` at the sample's action, which is
    /// held fixed while the mean and the noise factor move.
    pub fn grad_log_prob(&self, x: &DVector<f64>, sample: &PolicySample, scale: f64) -> Result<ThetaGrad, QpError> {
        if scale == 0.0 {
            return Ok(ThetaGrad::zeros(self.n_params()));
        }
        let ev = self.evaluate(x, None)?;
        self.grad_log_prob_at(x, &ev, &sample.u, scale)
    }

    /// As [`Self::grad_log_prob`], reusing an unpinned evaluation at `x`.
    pub fn grad_log_prob_at(&self, x: &DVector<f64>, ev: &Evaluation, u: &DVector<f64>, scale: f64) -> Result<ThetaGrad, QpError> {
        let n = self.n_params();
        let mean = &self.k * &ev.sol.mu_star;
        let l = self.noise_factor();
        let eps = l
            .solve_lower_triangular(&(u - &mean))
            .expect("noise factor has a positive diagonal");
        let d_mean = l
            .tr_solve_lower_triangular(&eps)
            .expect("noise factor has a positive diagonal")
            * scale;
        let mut grad = self.chain(x, &ev, &self.k.tr_mul(&d_mean), 0.0)?;

        // ∂/∂L of −½‖L⁻¹(u − mean)‖² − Σ log L_ii, restricted to the lower triangle
        let m = self.m_u();
        let d_l = &d_mean * eps.transpose();
        let mut off = n - m * (m + 1) / 2;
        for i in 0..m {
            for j in 0..=i {
                grad.0[off] = if i == j {
                    (d_l[(i, i)] - scale / l[(i, i)]) * sigmoid(self.noise_raw[(i, i)])
                } else {
                    d_l[(i, j)]
                };
                off += 1;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn small(seed: u64) -> UnifiedParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = LiftingNet::mlp(&[2, 3, 3], &mut rng);
        UnifiedParams::random(
            net,
            4,
            1,
            &BoxBounds::symmetric(1, 1.0),
            0.3,
            0.5,
            1e-3,
            SoftConfig::default(),
            &mut rng,
        )
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-4, 0.3, 2.0, 45.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn flat_round_trip() {
        let th = small(1);
        let mut other = th.clone();
        let p = th.to_flat();
        assert_eq!(p.len(), th.n_params());
        other.set_flat(&p);
        assert_eq!(other, th);
    }

    #[test]
    fn initial_noise_factor() {
        let th = small(2);
        assert!((th.noise_factor()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pinned_at_policy_equals_value() {
        let th = small(3);
        let x = v(&[0.4, -0.2]);
        let u = th.policy(&x).unwrap();
        let (val, _) = th.value(&x).unwrap();
        let (q, _) = th.q_value(&x, &u).unwrap();
        assert!((val - q).abs() < 1e-9);
        assert!(th.advantage(&x, &v(&[0.9])).unwrap() <= 1e-9);
    }

    #[test]
    fn zero_epsilon_is_the_mode() {
        let th = small(4);
        let x = v(&[0.1, 0.7]);
        let s = th.sample_with_epsilon(&x, &v(&[0.0])).unwrap();
        assert_eq!(s.u, th.policy(&x).unwrap());
        let mode = -(0.5f64).ln() - 0.5 * (2.0 * PI).ln();
        assert!((s.log_prob - mode).abs() < 1e-12);
    }

    #[test]
    fn log_prob_two_paths_agree() {
        let th = small(5);
        let x = v(&[-0.3, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = th.sample_action(&x, &mut rng).unwrap();
            assert!((s.log_prob - th.log_prob(&s.u, &s.mean)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_scale_and_upstream_give_zero_gradients() {
        let th = small(6);
        let x = v(&[0.2, 0.2]);
        let s = th.sample_with_epsilon(&x, &v(&[0.3])).unwrap();
        assert!(th.grad_log_prob(&x, &s, 0.0).unwrap().0.iter().all(|&g| g == 0.0));
        assert!(th.grad_value(&x, 0.0).unwrap().0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_at_mode_only_moves_noise() {
        let th = small(7);
        let x = v(&[0.2, -0.5]);
        let s = th.sample_with_epsilon(&x, &v(&[0.0])).unwrap();
        let g = th.grad_log_prob(&x, &s, 1.0).unwrap();
        let n = g.0.len();
        assert!(g.0[..n - 1].iter().all(|&v| v.abs() < 1e-12));
        // d/draw of −log(σ_min + softplus(raw))
        let raw = th.noise_raw[(0, 0)];
        let expected = -sigmoid(raw) / th.noise_factor()[(0, 0)];
        assert!((g.0[n - 1] - expected).abs() < 1e-12);
    }

    #[test]
    fn updates_keep_objective_concave() {
        let mut th = small(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let g = ThetaGrad((0..th.n_params()).map(|_| rng.random_range(-5.0..5.0)).collect());
            th.apply(&g, 1.0);
            assert!(th.is_negative_definite());
        }
    }

    #[test]
    fn clip_norm_rescales() {
        let mut g = ThetaGrad(vec![3.0, 4.0]);
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
        let mut h = ThetaGrad(vec![0.3, 0.4]);
        h.clip_norm(1.0);
        assert_eq!(h.0, vec![0.3, 0.4]);
    }
}
