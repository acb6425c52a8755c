//! Reverse-mode differentiation of a solved QP through its KKT system.
//!
//! For `L = gᵀμ* + g_v·value` the μ-part is obtained by one adjoint solve with
//! the reduced KKT matrix of the strictly active constraints,
//!
//! ```text
//! S = [ P   Nᵀ ]      S·w = [g; 0]
//!     [ N   0  ]
//! ```
//!
//! and the value part by the envelope relations (∂value/∂q = μ*,
//! ∂value/∂Q = ½μ*μ*ᵀ, ∂value/∂rhs = dual).

use nalgebra::{DMatrix, DVector};

use super::{ActionPin, Form, QpData, QpError, QpSolution, SoftConfig, StdForm};

const DAMPING: f64 = 1e-10;
const DAMPED_RESIDUAL_MAX: f64 = 1e-6;

/// Gradients with respect to every [`QpData`] field and the input `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    /// Symmetric.
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DMatrix<f64>,
    pub rhs_eq: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub d_in: DMatrix<f64>,
    pub rhs_in: DVector<f64>,
    pub z: DVector<f64>,
    /// Gradient with respect to the pinned action, when a pin was used.
    pub pin_u: Option<DVector<f64>>,
}

/// Strictly active multipliers; weakly active rows (λ ≈ 0) are treated as
/// inactive, giving the one-sided derivative of the inactive branch.
fn strictly_active(sol: &QpSolution) -> Vec<usize> {
    let scale = 1.0 + sol.std_lambda.amax();
    sol.std_active
        .iter()
        .copied()
        .filter(|&i| sol.std_lambda[i] > 1e-12 * scale)
        .collect()
}

fn solve_adjoint(s: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let scale = 1.0 + rhs.amax();
    if let Some(w) = s.clone().lu().solve(rhs) {
        let r = (s * &w - rhs).amax();
        if w.iter().all(|v| v.is_finite()) && r <= 1e-8 * scale {
            return Ok(w);
        }
    }
    // Tikhonov-damped least squares for rank-deficient systems
    let n = s.nrows();
    let normal = s.tr_mul(s) + DMatrix::identity(n, n) * DAMPING;
    let w = normal
        .cholesky()
        .map(|c| c.solve(&s.tr_mul(rhs)))
        .ok_or(QpError::SingularKkt(f64::INFINITY))?;
    let r = (s * &w - rhs).amax();
    if !(r <= DAMPED_RESIDUAL_MAX * scale) {
        return Err(QpError::SingularKkt(r));
    }
    Ok(w)
}

/// Gradient of `upstream_muᵀ·μ* + upstream_value·value` with respect to all
/// problem data and `z`.
pub fn backward(
    qp: &QpData,
    z: &DVector<f64>,
    pin: Option<&ActionPin>,
    soft: Option<&SoftConfig>,
    sol: &QpSolution,
    upstream_mu: &DVector<f64>,
    upstream_value: f64,
) -> Result<QpGradients, QpError> {
    let mut std = StdForm::build(qp, z, pin, soft, sol.form);
    if sol.form == Form::Hard {
        std.soft_eq = false;
    }
    let x = std.primal(sol);
    let n = x.len();
    let lam = &sol.std_lambda;
    let nu = &sol.nu_star;
    let gv = upstream_value;

    // envelope part
    let mut d_p = &x * x.transpose() * (0.5 * gv);
    let mut d_c = &x * gv;
    let mut d_gin = DMatrix::zeros(std.g_in.nrows(), n);
    let mut d_hin = lam * gv;
    let mut d_geq = DMatrix::zeros(std.g_eq.nrows(), n);
    let mut d_heq = nu * gv;
    if gv != 0.0 {
        for i in 0..std.g_in.nrows() {
            if lam[i] != 0.0 {
                add_row(&mut d_gin, i, &(x.transpose() * (-gv * lam[i])));
            }
        }
        for i in 0..std.g_eq.nrows() {
            add_row(&mut d_geq, i, &(x.transpose() * (-gv * nu[i])));
        }
    }

    // adjoint part
    if upstream_mu.amax() != 0.0 {
        let act = strictly_active(sol);
        let k_in = act.len();
        let m_eq = std.g_eq.nrows();
        let k = k_in + m_eq;
        let mut s = DMatrix::zeros(n + k, n + k);
        s.view_mut((0, 0), (n, n)).copy_from(&std.p);
        for (r, &i) in act.iter().enumerate() {
            for col in 0..n {
                let v = std.g_in[(i, col)];
                s[(n + r, col)] = v;
                s[(col, n + r)] = v;
            }
        }
        for r in 0..m_eq {
            for col in 0..n {
                let v = std.g_eq[(r, col)];
                s[(n + k_in + r, col)] = v;
                s[(col, n + k_in + r)] = v;
            }
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, std.n_mu).copy_from(upstream_mu);
        let w = solve_adjoint(&s, &rhs)?;
        let w_x = w.rows(0, n).into_owned();

        d_p -= (&w_x * x.transpose() + &x * w_x.transpose()) * 0.5;
        d_c -= &w_x;
        for (r, &i) in act.iter().enumerate() {
            let wy = w[n + r];
            let row = w_x.transpose() * lam[i] - x.transpose() * wy;
            add_row(&mut d_gin, i, &row);
            d_hin[i] += wy;
        }
        for r in 0..m_eq {
            let wy = w[n + k_in + r];
            let row = w_x.transpose() * nu[r] - x.transpose() * wy;
            add_row(&mut d_geq, r, &row);
            d_heq[r] += wy;
        }
    }

    // map standard-form gradients back onto the problem data
    let n_mu = std.n_mu;
    let m_in = std.m_in;
    let m_eq = std.m_eq;
    let d_hin_rows = d_hin.rows(0, m_in).into_owned();
    let d_heq_rows = d_heq.rows(0, m_eq).into_owned();
    let q_mat = d_p.view((0, 0), (n_mu, n_mu)).into_owned();
    let q_mat = (&q_mat + q_mat.transpose()) * 0.5;
    let d_z = -(qp.c_in.tr_mul(&d_hin_rows)) - qp.a_eq.tr_mul(&d_heq_rows);
    let pin_u = pin.map(|p| d_heq.rows(m_eq, p.u.len()).into_owned());
    Ok(QpGradients {
        q_mat,
        q_vec: d_c.rows(0, n_mu).into_owned(),
        a_eq: -(&d_heq_rows * z.transpose()),
        b_eq: d_geq.view((0, 0), (m_eq, n_mu)).into_owned(),
        rhs_eq: d_heq_rows,
        c_in: -(&d_hin_rows * z.transpose()),
        d_in: d_gin.view((0, 0), (m_in, n_mu)).into_owned(),
        rhs_in: d_hin_rows,
        z: d_z,
        pin_u,
    })
}

fn add_row(m: &mut DMatrix<f64>, i: usize, row: &nalgebra::RowDVector<f64>) {
    for (col, v) in row.iter().enumerate() {
        m[(i, col)] += v;
    }
}
