//! The lifting `z = f_β(x)` that feeds the QP, and the two ways of
//! initializing it: linear system identification (which yields an MPC-shaped
//! QP) and regression onto a fixed dictionary of Koopman-style observables.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::diffqp::QpData;
use crate::envs::BoxBounds;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LiftingError {
    #[error("regression is rank deficient (condition {0:.3e})")]
    RankDeficient(f64),
    #[error("no data")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

/// Fully connected network; the last layer is always linear.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingNet {
    pub layers: Vec<Layer>,
}

/// Per-layer `(dW, db)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingGrads {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl LiftingGrads {
    pub fn zeros_like(net: &LiftingNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.w.nrows(), l.w.ncols()), DVector::zeros(l.b.len())))
                .collect(),
        }
    }

    /// Same order as [`LiftingNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b.as_slice());
        }
        v
    }
}

impl LiftingNet {
    /// A single linear layer `z = x`.
    pub fn identity(n: usize) -> Self {
        Self {
            layers: vec![Layer {
                w: DMatrix::identity(n, n),
                b: DVector::zeros(n),
                act: Activation::Identity,
            }],
        }
    }

    /// Tanh hidden layers and a linear output, Glorot-uniform weights, zero
    /// biases. `sizes` lists every width from input to output.
    pub fn mlp(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output width");
        let mut layers = Vec::new();
        for k in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
            let act = if k + 2 == sizes.len() {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            layers.push(Layer {
                w,
                b: DVector::zeros(fan_out),
                act,
            });
        }
        Self { layers }
    }

    pub fn n_x(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter vector: each layer's weights (column-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(l.w.as_slice());
            v.extend_from_slice(l.b.as_slice());
        }
        v
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    fn forward(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut acts = vec![x.clone()];
        for l in &self.layers {
            let mut a = &l.w * acts.last().unwrap() + &l.b;
            if l.act == Activation::Tanh {
                a.apply(|v| *v = v.tanh());
            }
            acts.push(a);
        }
        acts
    }
}

pub fn lift(net: &LiftingNet, x: &DVector<f64>) -> DVector<f64> {
    net.forward(x).pop().unwrap()
}

/// Reverse-mode gradient of `upstream_zᵀ·lift(net, x)`.
pub fn lift_backward(net: &LiftingNet, x: &DVector<f64>, upstream_z: &DVector<f64>) -> (LiftingGrads, DVector<f64>) {
    let acts = net.forward(x);
    let mut grads = Vec::with_capacity(net.layers.len());
    let mut g = upstream_z.clone();
    for (k, l) in net.layers.iter().enumerate().rev() {
        if l.act == Activation::Tanh {
            g.zip_apply(&acts[k + 1], |gi, a| *gi *= 1.0 - a * a);
        }
        grads.push((&g * acts[k].transpose(), g.clone()));
        g = l.w.tr_mul(&g);
    }
    grads.reverse();
    (LiftingGrads { layers: grads }, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdModel {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub residual_norm: f64,
}

fn least_squares(phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, LiftingError> {
    if phi.nrows() < phi.ncols() {
        return Err(LiftingError::RankDeficient(f64::INFINITY));
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(LiftingError::RankDeficient(smax / smin));
    }
    svd.solve(y, 0.0).map_err(|_| LiftingError::RankDeficient(smax / smin))
}

/// Fits `x′ ≈ Â·x + B̂·u` by least squares.
pub fn sysid_least_squares(
    transitions: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
) -> Result<SysIdModel, LiftingError> {
    let Some((x0, u0, _)) = transitions.first() else {
        return Err(LiftingError::Empty);
    };
    let (n, m) = (x0.len(), u0.len());
    let k = transitions.len();
    let mut phi = DMatrix::zeros(k, n + m);
    let mut y = DMatrix::zeros(k, n);
    for (r, (x, u, xn)) in transitions.iter().enumerate() {
        if x.len() != n || u.len() != m || xn.len() != n {
            return Err(LiftingError::DimensionMismatch(format!("transition {r}")));
        }
        phi.view_mut((r, 0), (1, n)).copy_from(&x.transpose());
        phi.view_mut((r, n), (1, m)).copy_from(&u.transpose());
        y.view_mut((r, 0), (1, n)).copy_from(&xn.transpose());
    }
    let theta = least_squares(&phi, &y)?;
    let residual_norm = (&phi * &theta - &y).norm();
    Ok(SysIdModel {
        a_hat: theta.rows(0, n).transpose(),
        b_hat: theta.rows(n, m).transpose(),
        residual_norm,
    })
}

/// One scalar observable of the state.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Coord(usize),
    Sin(usize),
    Cos(usize),
    /// `x_i · sin(x_j)`
    CoordSin(usize, usize),
    /// `Π x_i^{p_i}`
    Monomial(Vec<u32>),
}

impl Feature {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Feature::Coord(i) => x[*i],
            Feature::Sin(i) => x[*i].sin(),
            Feature::Cos(i) => x[*i].cos(),
            Feature::CoordSin(i, j) => x[*i] * x[*j].sin(),
            Feature::Monomial(p) => p.iter().enumerate().map(|(i, &k)| x[i].powi(k as i32)).product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub features: Vec<Feature>,
}

impl Dictionary {
    pub fn identity(n: usize) -> Self {
        Self {
            features: (0..n).map(Feature::Coord).collect(),
        }
    }

    /// `(θ, θ̇, sin θ, cos θ, θ̇·sin θ)`.
    pub fn pendulum() -> Self {
        Self {
            features: vec![
                Feature::Coord(0),
                Feature::Coord(1),
                Feature::Sin(0),
                Feature::Cos(0),
                Feature::CoordSin(1, 0),
            ],
        }
    }

    pub fn n_z(&self) -> usize {
        self.features.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_z(), self.features.iter().map(|f| f.eval(x)))
    }
}

/// A recorded state sequence with the inputs applied between states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub max_iters: usize,
    /// Stop once the mean squared fit error drops below this.
    pub target_mse: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            target_mse: 1e-6,
        }
    }
}

/// Linear model `z′ ≈ A_z·z + B_z·u` on lifted pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanPredictor {
    pub a_z: DMatrix<f64>,
    pub b_z: DMatrix<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub net: LiftingNet,
    pub mse: f64,
    pub iterations: usize,
    pub predictor: Option<KoopmanPredictor>,
}

fn fit_residuals(net: &LiftingNet, xs: &[DVector<f64>], targets: &[DVector<f64>]) -> DVector<f64> {
    let nz = net.n_z();
    let mut r = DVector::zeros(xs.len() * nz);
    for (k, (x, t)) in xs.iter().zip(targets).enumerate() {
        r.rows_mut(k * nz, nz).copy_from(&(lift(net, x) - t));
    }
    r
}

fn fit_jacobian(net: &LiftingNet, xs: &[DVector<f64>]) -> DMatrix<f64> {
    let nz = net.n_z();
    let mut jac = DMatrix::zeros(xs.len() * nz, net.n_params());
    for (k, x) in xs.iter().enumerate() {
        for j in 0..nz {
            let mut e = DVector::zeros(nz);
            e[j] = 1.0;
            let (g, _) = lift_backward(net, x, &e);
            for (c, v) in g.flatten().into_iter().enumerate() {
                jac[(k * nz + j, c)] = v;
            }
        }
    }
    jac
}

/// Regresses `net` onto the dictionary values at every trajectory state with
/// Levenberg–Marquardt, then fits a linear predictor on the lifted pairs.
pub fn edmd_pretrain(
    dict: &Dictionary,
    trajectories: &[Trajectory],
    net: &LiftingNet,
    cfg: &PretrainConfig,
) -> Result<EdmdFit, LiftingError> {
    let xs: Vec<DVector<f64>> = trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect();
    if xs.is_empty() {
        return Err(LiftingError::Empty);
    }
    if net.n_z() != dict.n_z() || net.n_x() != xs[0].len() {
        return Err(LiftingError::DimensionMismatch(format!(
            "net {}→{}, dictionary {}",
            net.n_x(),
            net.n_z(),
            dict.n_z()
        )));
    }
    let targets: Vec<DVector<f64>> = xs.iter().map(|x| dict.eval(x)).collect();
    let n_res = (xs.len() * dict.n_z()) as f64;
    let mut net = net.clone();
    let mut r = fit_residuals(&net, &xs, &targets);
    let mut mse = r.norm_squared() / n_res;
    let mut damping = 1e-3;
    let mut iterations = 0;
    while iterations < cfg.max_iters && mse > cfg.target_mse {
        iterations += 1;
        let jac = fit_jacobian(&net, &xs);
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&r);
        let p0 = DVector::from_vec(net.params());
        let mut improved = false;
        while damping < 1e12 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * (1.0 + jtj[(i, i)]);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let mut trial = net.clone();
            trial.set_params((&p0 + &step).as_slice());
            let r_trial = fit_residuals(&trial, &xs, &targets);
            let mse_trial = r_trial.norm_squared() / n_res;
            if mse_trial < mse {
                net = trial;
                r = r_trial;
                mse = mse_trial;
                damping = (damping / 3.0).max(1e-12);
                improved = true;
                break;
            }
            damping *= 4.0;
        }
        if !improved {
            break;
        }
    }

    let predictor = koopman_predictor(&net, trajectories).ok();
    Ok(EdmdFit {
        net,
        mse,
        iterations,
        predictor,
    })
}

fn koopman_predictor(net: &LiftingNet, trajectories: &[Trajectory]) -> Result<KoopmanPredictor, LiftingError> {
    let nz = net.n_z();
    let mut rows = Vec::new();
    for t in trajectories {
        for (k, u) in t.inputs.iter().enumerate().take(t.states.len().saturating_sub(1)) {
            rows.push((lift(net, &t.states[k]), u.clone(), lift(net, &t.states[k + 1])));
        }
    }
    let Some((_, u0, _)) = rows.first() else {
        return Err(LiftingError::Empty);
    };
    let m = u0.len();
    let mut phi = DMatrix::zeros(rows.len(), nz + m);
    let mut y = DMatrix::zeros(rows.len(), nz);
    for (r, (z, u, zn)) in rows.iter().enumerate() {
        phi.view_mut((r, 0), (1, nz)).copy_from(&z.transpose());
        phi.view_mut((r, nz), (1, m)).copy_from(&u.transpose());
        y.view_mut((r, 0), (1, nz)).copy_from(&zn.transpose());
    }
    let theta = least_squares(&phi, &y)?;
    Ok(KoopmanPredictor {
        residual_norm: (&phi * &theta - &y).norm(),
        a_z: theta.rows(0, nz).transpose(),
        b_z: theta.rows(nz, m).transpose(),
    })
}

/// An MPC-shaped QP over the decision vector `μ = (s₀, s₁..s_N, u₀..u_{N−1})`
/// with `z = x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcLifting {
    pub net: LiftingNet,
    pub qp: QpData,
    pub k: DMatrix<f64>,
    pub horizon: usize,
}

/// Builds the receding-horizon QP of the identified model: maximize
/// `−Σ_{t=0}^{N−1}(‖s_t‖² + ‖u_t‖²) − s_Nᵀ·P·s_N` subject to `s₀ = z`, the
/// predicted dynamics, and box constraints on the predicted states
/// `s₁..s_N` and on every input. The optimal value is the full predicted
/// return from `x`, stage reward at `x` included.
pub fn build_mpc_lifting(
    model: &SysIdModel,
    horizon: usize,
    terminal: &DMatrix<f64>,
    state_box: &BoxBounds,
    input_box: &BoxBounds,
) -> MpcLifting {
    assert!(horizon >= 1, "horizon must be positive");
    let n = model.a_hat.nrows();
    let m = model.b_hat.ncols();
    let ns = (horizon + 1) * n;
    let n_mu = ns + horizon * m;
    let s = |t: usize| t * n;
    let u = |t: usize| ns + t * m;

    let mut q_mat = DMatrix::zeros(n_mu, n_mu);
    for t in 0..horizon {
        q_mat.view_mut((s(t), s(t)), (n, n)).fill_diagonal(-2.0);
        q_mat.view_mut((u(t), u(t)), (m, m)).fill_diagonal(-2.0);
    }
    q_mat
        .view_mut((s(horizon), s(horizon)), (n, n))
        .copy_from(&(terminal * -2.0));

    let mut a_eq = DMatrix::zeros(ns, n);
    let mut b_eq = DMatrix::zeros(ns, n_mu);
    a_eq.view_mut((0, 0), (n, n)).fill_diagonal(-1.0);
    b_eq.view_mut((0, 0), (n, n)).fill_diagonal(1.0);
    for t in 1..=horizon {
        let row = s(t);
        b_eq.view_mut((row, s(t)), (n, n)).fill_diagonal(1.0);
        b_eq.view_mut((row, s(t - 1)), (n, n)).copy_from(&(-&model.a_hat));
        b_eq.view_mut((row, u(t - 1)), (n, m)).copy_from(&(-&model.b_hat));
    }

    let boxed: Vec<(usize, f64, f64)> = (n..n_mu)
        .map(|i| {
            if i < ns {
                (i, state_box.low[i % n], state_box.high[i % n])
            } else {
                (i, input_box.low[(i - ns) % m], input_box.high[(i - ns) % m])
            }
        })
        .collect();
    let m_in = 2 * boxed.len();
    let mut d_in = DMatrix::zeros(m_in, n_mu);
    let mut rhs_in = DVector::zeros(m_in);
    for (r, &(i, lo, hi)) in boxed.iter().enumerate() {
        d_in[(2 * r, i)] = 1.0;
        rhs_in[2 * r] = hi;
        d_in[(2 * r + 1, i)] = -1.0;
        rhs_in[2 * r + 1] = -lo;
    }

    let mut k = DMatrix::zeros(m, n_mu);
    k.view_mut((0, u(0)), (m, m)).fill_diagonal(1.0);

    MpcLifting {
        net: LiftingNet::identity(n),
        qp: QpData {
            q_mat,
            q_vec: DVector::zeros(n_mu),
            a_eq,
            b_eq,
            rhs_eq: DVector::zeros(ns),
            c_in: DMatrix::zeros(m_in, n),
            d_in,
            rhs_in,
        },
        k,
        horizon,
    }
}
