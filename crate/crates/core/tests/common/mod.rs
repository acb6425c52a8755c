//! Test-only oracles shared by the integration and acceptance suites. Nothing
//! here calls into the active-set solver or the KKT backward pass.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unirl::diffqp::QpData;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_mat(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn randn_vec(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A random QP that is strictly feasible at some interior point.
pub fn random_qp(rng: &mut impl Rng, n: usize, m_in: usize, m_eq: usize, n_z: usize) -> (QpData, DVector<f64>) {
    let m = randn_mat(rng, n, n, 0.7);
    let q_mat = -(m.transpose() * &m + DMatrix::identity(n, n) * 0.3);
    let q_vec = randn_vec(rng, n, 1.0);
    let z = randn_vec(rng, n_z, 1.0);
    let mu0 = randn_vec(rng, n, 0.5);
    let a_eq = randn_mat(rng, m_eq, n_z, 1.0);
    let b_eq = randn_mat(rng, m_eq, n, 1.0);
    let rhs_eq = &a_eq * &z + &b_eq * &mu0;
    let c_in = randn_mat(rng, m_in, n_z, 1.0);
    let d_in = randn_mat(rng, m_in, n, 1.0);
    let margin = DVector::from_fn(m_in, |_, _| rng.random_range(0.05..1.0));
    let rhs_in = &c_in * &z + &d_in * &mu0 + margin;
    (
        QpData {
            q_mat,
            q_vec,
            a_eq,
            b_eq,
            rhs_eq,
            c_in,
            d_in,
            rhs_in,
        },
        z,
    )
}

pub struct OracleSolution {
    pub mu: DVector<f64>,
    pub lambda: DVector<f64>,
    pub value: f64,
    pub active: Vec<usize>,
}

/// Solves the QP by enumerating every candidate active set of inequality rows
/// and keeping the KKT point (primal and dual feasible). Exponential in m_in.
pub fn enumerate_active_sets(qp: &QpData, z: &DVector<f64>) -> Option<OracleSolution> {
    let n = qp.n_mu();
    let m_in = qp.m_in();
    let m_eq = qp.m_eq();
    let h_in = &qp.rhs_in - &qp.c_in * z;
    let h_eq = &qp.rhs_eq - &qp.a_eq * z;
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1u32 << m_in) {
        let set: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let k = set.len() + m_eq;
        if k > n {
            continue;
        }
        let mut s = DMatrix::zeros(n + k, n + k);
        s.view_mut((0, 0), (n, n)).copy_from(&qp.q_mat);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&qp.q_vec));
        for (r, &i) in set.iter().enumerate() {
            for c in 0..n {
                s[(n + r, c)] = qp.d_in[(i, c)];
                s[(c, n + r)] = qp.d_in[(i, c)];
            }
            rhs[n + r] = h_in[i];
        }
        for r in 0..m_eq {
            let row = n + set.len() + r;
            for c in 0..n {
                s[(row, c)] = qp.b_eq[(r, c)];
                s[(c, row)] = qp.b_eq[(r, c)];
            }
            rhs[row] = h_eq[r];
        }
        let Some(sol) = s.lu().solve(&rhs) else { continue };
        let mu = sol.rows(0, n).into_owned();
        let mut lambda = DVector::zeros(m_in);
        for (r, &i) in set.iter().enumerate() {
            lambda[i] = -sol[n + r];
        }
        if lambda.iter().any(|&l| l < -1e-9) {
            continue;
        }
        let slack = &h_in - &qp.d_in * &mu;
        if slack.iter().any(|&s| s < -1e-9) {
            continue;
        }
        let value = 0.5 * mu.dot(&(&qp.q_mat * &mu)) + qp.q_vec.dot(&mu);
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(OracleSolution {
                mu,
                lambda,
                value,
                active: set,
            });
        }
    }
    best
}

/// Random non-degenerate feasible QP: every inequality is either clearly
/// inactive or strictly active at the oracle solution.
pub fn random_nondegenerate_qp(
    rng: &mut impl Rng,
    max_n: usize,
    max_in: usize,
    max_eq: usize,
) -> (QpData, DVector<f64>, OracleSolution) {
    loop {
        let n = rng.random_range(1..=max_n);
        let m_in = rng.random_range(0..=max_in);
        let m_eq = rng.random_range(0..=max_eq.min(n - 1));
        let n_z = rng.random_range(1..=3);
        let (qp, z) = random_qp(rng, n, m_in, m_eq, n_z);
        let Some(orc) = enumerate_active_sets(&qp, &z) else { continue };
        let h_in = &qp.rhs_in - &qp.c_in * &z;
        let slack = &h_in - &qp.d_in * &orc.mu;
        let ok = (0..m_in).all(|i| {
            if orc.active.contains(&i) {
                orc.lambda[i] > 1e-4
            } else {
                slack[i] > 1e-4
            }
        });
        if ok {
            return (qp, z, orc);
        }
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs_floor)
}

/// Central finite difference of a scalar function of one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Perturbs one scalar entry of the QP data (symmetrically for `q_mat`).
#[derive(Debug, Clone, Copy)]
pub enum Slot {
    QMat(usize, usize),
    QVec(usize),
    AEq(usize, usize),
    BEq(usize, usize),
    RhsEq(usize),
    CIn(usize, usize),
    DIn(usize, usize),
    RhsIn(usize),
    Z(usize),
}

pub fn all_slots(qp: &QpData) -> Vec<Slot> {
    let n = qp.n_mu();
    let nz = qp.n_z();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            v.push(Slot::QMat(i, j));
        }
        v.push(Slot::QVec(i));
    }
    for r in 0..qp.m_eq() {
        for c in 0..nz {
            v.push(Slot::AEq(r, c));
        }
        for c in 0..n {
            v.push(Slot::BEq(r, c));
        }
        v.push(Slot::RhsEq(r));
    }
    for r in 0..qp.m_in() {
        for c in 0..nz {
            v.push(Slot::CIn(r, c));
        }
        for c in 0..n {
            v.push(Slot::DIn(r, c));
        }
        v.push(Slot::RhsIn(r));
    }
    for c in 0..nz {
        v.push(Slot::Z(c));
    }
    v
}

pub fn perturb(qp: &QpData, z: &DVector<f64>, slot: Slot, h: f64) -> (QpData, DVector<f64>) {
    let mut qp = qp.clone();
    let mut z = z.clone();
    match slot {
        Slot::QMat(i, j) => {
            qp.q_mat[(i, j)] += h;
            if i != j {
                qp.q_mat[(j, i)] += h;
            }
        }
        Slot::QVec(i) => qp.q_vec[i] += h,
        Slot::AEq(r, c) => qp.a_eq[(r, c)] += h,
        Slot::BEq(r, c) => qp.b_eq[(r, c)] += h,
        Slot::RhsEq(r) => qp.rhs_eq[r] += h,
        Slot::CIn(r, c) => qp.c_in[(r, c)] += h,
        Slot::DIn(r, c) => qp.d_in[(r, c)] += h,
        Slot::RhsIn(r) => qp.rhs_in[r] += h,
        Slot::Z(c) => z[c] += h,
    }
    (qp, z)
}

pub fn analytic(g: &unirl::diffqp::QpGradients, slot: Slot) -> f64 {
    match slot {
        Slot::QMat(i, j) if i == j => g.q_mat[(i, i)],
        Slot::QMat(i, j) => g.q_mat[(i, j)] + g.q_mat[(j, i)],
        Slot::QVec(i) => g.q_vec[i],
        Slot::AEq(r, c) => g.a_eq[(r, c)],
        Slot::BEq(r, c) => g.b_eq[(r, c)],
        Slot::RhsEq(r) => g.rhs_eq[r],
        Slot::CIn(r, c) => g.c_in[(r, c)],
        Slot::DIn(r, c) => g.d_in[(r, c)],
        Slot::RhsIn(r) => g.rhs_in[r],
        Slot::Z(c) => g.z[c],
    }
}

/// Random small unified parameter set with a tanh lifting.
pub fn random_theta(rng: &mut ChaCha8Rng, scale: f64) -> unirl::unified::UnifiedParams {
    let net = unirl::lifting::LiftingNet::mlp(&[2, 4, 3], rng);
    unirl::unified::UnifiedParams::random(
        net,
        4,
        1,
        &unirl::envs::BoxBounds::symmetric(1, 1.0),
        scale,
        0.4,
        1e-3,
        unirl::diffqp::SoftConfig::default(),
        rng,
    )
}

/// Central differences of `f` over every flat coordinate of θ; `None` when
/// the QP active set changes inside the step for some coordinate.
pub fn theta_fd(
    theta: &unirl::unified::UnifiedParams,
    h: f64,
    f: impl Fn(&unirl::unified::UnifiedParams) -> (f64, Vec<usize>),
) -> Option<Vec<f64>> {
    let p0 = theta.to_flat();
    let (_, active0) = f(theta);
    let mut out = Vec::with_capacity(p0.len());
    let mut th = theta.clone();
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        th.set_flat(&p);
        let (fp, ap) = f(&th);
        p[i] = p0[i] - h;
        th.set_flat(&p);
        let (fm, am) = f(&th);
        if ap != active0 || am != active0 {
            return None;
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Some(out)
}
