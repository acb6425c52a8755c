//! Dense parametric quadratic programs: solve, KKT residuals and exact
//! derivatives through the KKT system.
//!
//! The problem solved for a given input `z` is
//!
//! ```text
//! max_μ  ½μᵀQμ + qᵀμ
//! s.t.   A z + B μ = b
//!        C z + D μ ≤ d
//!        K μ = u            (optional action pin)
//! ```
//!
//! Optionally the inequalities (and, on request, the equalities) are softened
//! with nonnegative slacks `ε` and the penalty
//! `ρ(ε) = -(ρ_lin·1ᵀε + ρ_quad·‖ε‖²)`.
//!
//! Dual conventions follow the maximization form: stationarity reads
//! `Qμ + q = Dᵀλ + Bᵀν (+ Kᵀν_pin)` with `λ ≥ 0`, so `∂value/∂d = λ` and
//! `∂value/∂b = ν`.

mod active_set;
mod backward;

pub use backward::{backward, QpGradients};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use active_set::{solve_max, ActiveSetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective matrix is not negative definite")]
    NotNegativeDefinite,
    #[error("hard-constrained problem is infeasible")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    MaxIterations,
    #[error("KKT system is singular (residual {0:.3e})")]
    SingularKkt(f64),
    #[error("invalid soft-constraint configuration: {0}")]
    InvalidSoftConfig(String),
}

/// Parameters of one parametric QP. `n_mu` decision variables, `n_z` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QpData {
    /// Symmetric negative-definite objective matrix (n_mu × n_mu).
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    /// Equality input coefficients (m_eq × n_z).
    pub a_eq: DMatrix<f64>,
    /// Equality decision coefficients (m_eq × n_mu).
    pub b_eq: DMatrix<f64>,
    pub rhs_eq: DVector<f64>,
    /// Inequality input coefficients (m_in × n_z).
    pub c_in: DMatrix<f64>,
    /// Inequality decision coefficients (m_in × n_mu).
    pub d_in: DMatrix<f64>,
    pub rhs_in: DVector<f64>,
}

impl QpData {
    /// A problem with no constraints at all.
    pub fn unconstrained(q_mat: DMatrix<f64>, q_vec: DVector<f64>, n_z: usize) -> Self {
        let n = q_vec.len();
        Self {
            q_mat,
            q_vec,
            a_eq: DMatrix::zeros(0, n_z),
            b_eq: DMatrix::zeros(0, n),
            rhs_eq: DVector::zeros(0),
            c_in: DMatrix::zeros(0, n_z),
            d_in: DMatrix::zeros(0, n),
            rhs_in: DVector::zeros(0),
        }
    }

    pub fn n_mu(&self) -> usize {
        self.q_vec.len()
    }

    pub fn n_z(&self) -> usize {
        self.a_eq.ncols()
    }

    pub fn m_eq(&self) -> usize {
        self.rhs_eq.len()
    }

    pub fn m_in(&self) -> usize {
        self.rhs_in.len()
    }

    pub fn validate(&self, z: &DVector<f64>) -> Result<(), QpError> {
        let n = self.n_mu();
        let nz = self.n_z();
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(QpError::DimensionMismatch(what.to_string()))
            }
        };
        check(n >= 1, "n_mu must be at least 1")?;
        check(self.q_mat.shape() == (n, n), "q_mat")?;
        check(self.b_eq.shape() == (self.m_eq(), n), "b_eq")?;
        check(self.a_eq.nrows() == self.m_eq(), "a_eq rows")?;
        check(self.d_in.shape() == (self.m_in(), n), "d_in")?;
        check(self.c_in.shape() == (self.m_in(), nz), "c_in")?;
        check(z.len() == nz, "z")?;
        Ok(())
    }
}

/// Pins `K μ = u`; used to evaluate the Q-function at a given action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPin {
    pub k: DMatrix<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfig {
    pub rho_lin: f64,
    pub rho_quad: f64,
    pub soften_equalities: bool,
}

impl Default for SoftConfig {
    fn default() -> Self {
        Self {
            rho_lin: 1e3,
            rho_quad: 1.0,
            soften_equalities: false,
        }
    }
}

impl SoftConfig {
    fn validate(&self) -> Result<(), QpError> {
        if !(self.rho_lin >= 0.0) {
            return Err(QpError::InvalidSoftConfig("rho_lin must be nonnegative".into()));
        }
        // the slack block of the Hessian must stay strictly concave
        if !(self.rho_quad > 0.0) {
            return Err(QpError::InvalidSoftConfig("rho_quad must be positive".into()));
        }
        Ok(())
    }
}

/// Which standard form produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Form {
    Hard,
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub mu_star: DVector<f64>,
    /// Inequality duals, one per row of `d_in` (≥ 0).
    pub lambda_star: DVector<f64>,
    /// Equality duals: the `m_eq` rows of `b_eq` followed by the pin rows.
    pub nu_star: DVector<f64>,
    pub value: f64,
    /// Inequality rows in the final working set.
    pub active_set: Vec<usize>,
    /// Inequality slacks; present whenever the solve was softened.
    pub slack: Option<DVector<f64>>,
    /// Net equality slacks (`ε⁺ − ε⁻`), present when equalities were softened.
    pub eq_slack: Option<DVector<f64>>,
    pub iterations: usize,
    pub(crate) form: Form,
    /// Duals of every inequality row of the standard form that produced this
    /// solution (includes slack bounds in the augmented form).
    pub(crate) std_lambda: DVector<f64>,
    pub(crate) std_active: Vec<usize>,
}

impl QpSolution {
    pub fn max_slack(&self) -> f64 {
        let a = self.slack.as_ref().map_or(0.0, |s| s.amax());
        let b = self.eq_slack.as_ref().map_or(0.0, |s| s.amax());
        a.max(b)
    }
}

/// `max ½xᵀPx + cᵀx  s.t.  G_in x ≤ h_in, G_eq x = h_eq` assembled from a
/// [`QpData`], an input, an optional pin and an optional softening.
#[derive(Debug, Clone)]
pub(crate) struct StdForm {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g_in: DMatrix<f64>,
    pub h_in: DVector<f64>,
    pub g_eq: DMatrix<f64>,
    pub h_eq: DVector<f64>,
    pub n_mu: usize,
    pub m_in: usize,
    /// m_eq + pin rows.
    pub m_eq_all: usize,
    pub m_eq: usize,
    pub soft_eq: bool,
}

impl StdForm {
    pub(crate) fn build(
        qp: &QpData,
        z: &DVector<f64>,
        pin: Option<&ActionPin>,
        soft: Option<&SoftConfig>,
        form: Form,
    ) -> Self {
        let n_mu = qp.n_mu();
        let m_in = qp.m_in();
        let m_eq = qp.m_eq();
        let m_pin = pin.map_or(0, |p| p.u.len());
        let m_eq_all = m_eq + m_pin;

        let mut b_all = DMatrix::zeros(m_eq_all, n_mu);
        let mut e_all = DVector::zeros(m_eq_all);
        if m_eq > 0 {
            b_all.rows_mut(0, m_eq).copy_from(&qp.b_eq);
            e_all.rows_mut(0, m_eq).copy_from(&(&qp.rhs_eq - &qp.a_eq * z));
        }
        if let Some(p) = pin {
            b_all.rows_mut(m_eq, m_pin).copy_from(&p.k);
            e_all.rows_mut(m_eq, m_pin).copy_from(&p.u);
        }
        let h_ineq = &qp.rhs_in - &qp.c_in * z;

        match (form, soft) {
            (Form::Augmented, Some(s)) => {
                let soft_eq = s.soften_equalities;
                let n_eps_eq = if soft_eq { 2 * m_eq_all } else { 0 };
                let n = n_mu + m_in + n_eps_eq;
                let mut p = DMatrix::zeros(n, n);
                p.view_mut((0, 0), (n_mu, n_mu)).copy_from(&qp.q_mat);
                let mut c = DVector::zeros(n);
                c.rows_mut(0, n_mu).copy_from(&qp.q_vec);
                for k in n_mu..n {
                    p[(k, k)] = -2.0 * s.rho_quad;
                    c[k] = -s.rho_lin;
                }
                let rows_in = 2 * m_in + n_eps_eq;
                let mut g_in = DMatrix::zeros(rows_in, n);
                let mut h_in = DVector::zeros(rows_in);
                g_in.view_mut((0, 0), (m_in, n_mu)).copy_from(&qp.d_in);
                h_in.rows_mut(0, m_in).copy_from(&h_ineq);
                for i in 0..m_in {
                    g_in[(i, n_mu + i)] = -1.0;
                    g_in[(m_in + i, n_mu + i)] = -1.0;
                }
                for k in 0..n_eps_eq {
                    g_in[(2 * m_in + k, n_mu + m_in + k)] = -1.0;
                }
                let mut g_eq = DMatrix::zeros(m_eq_all, n);
                g_eq.view_mut((0, 0), (m_eq_all, n_mu)).copy_from(&b_all);
                if soft_eq {
                    for i in 0..m_eq_all {
                        g_eq[(i, n_mu + m_in + i)] = -1.0;
                        g_eq[(i, n_mu + m_in + m_eq_all + i)] = 1.0;
                    }
                }
                Self {
                    p,
                    c,
                    g_in,
                    h_in,
                    g_eq,
                    h_eq: e_all,
                    n_mu,
                    m_in,
                    m_eq_all,
                    m_eq,
                    soft_eq,
                }
            }
            _ => Self {
                p: qp.q_mat.clone(),
                c: qp.q_vec.clone(),
                g_in: qp.d_in.clone(),
                h_in: h_ineq,
                g_eq: b_all,
                h_eq: e_all,
                n_mu,
                m_in,
                m_eq_all,
                m_eq,
                soft_eq: false,
            },
        }
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.c.dot(x)
    }

    /// Standard-form primal point recovered from the public solution fields.
    pub(crate) fn primal(&self, sol: &QpSolution) -> DVector<f64> {
        let n = self.c.len();
        let mut x = DVector::zeros(n);
        x.rows_mut(0, self.n_mu).copy_from(&sol.mu_star);
        if n > self.n_mu {
            if let Some(s) = &sol.slack {
                x.rows_mut(self.n_mu, self.m_in).copy_from(s);
            }
            if self.soft_eq {
                if let Some(e) = &sol.eq_slack {
                    let base = self.n_mu + self.m_in;
                    for i in 0..self.m_eq_all {
                        x[base + i] = e[i].max(0.0);
                        x[base + self.m_eq_all + i] = (-e[i]).max(0.0);
                    }
                }
            }
        }
        x
    }
}

fn map_err(e: ActiveSetError) -> QpError {
    match e {
        ActiveSetError::NotConcave => QpError::NotNegativeDefinite,
        ActiveSetError::Infeasible => QpError::Infeasible,
        ActiveSetError::MaxIterations => QpError::MaxIterations,
    }
}

fn solve_form(std: &StdForm, form: Form, soft: bool) -> Result<QpSolution, QpError> {
    let res = solve_max(&std.p, &std.c, &std.g_in, &std.h_in, &std.g_eq, &std.h_eq).map_err(map_err)?;
    let n_mu = std.n_mu;
    let mu_star = res.x.rows(0, n_mu).into_owned();
    let lambda_star = res.lambda.rows(0, std.m_in).into_owned();
    let active_set = res.active_in.iter().copied().filter(|&i| i < std.m_in).collect();
    let (slack, eq_slack) = match form {
        Form::Augmented => {
            let s = res.x.rows(n_mu, std.m_in).map(|v| v.max(0.0));
            let e = std.soft_eq.then(|| {
                let base = n_mu + std.m_in;
                DVector::from_fn(std.m_eq_all, |i, _| res.x[base + i] - res.x[base + std.m_eq_all + i])
            });
            (Some(s), e)
        }
        Form::Hard if soft => (
            Some(DVector::zeros(std.m_in)),
            std.soft_eq.then(|| DVector::zeros(std.m_eq_all)),
        ),
        Form::Hard => (None, None),
    };
    Ok(QpSolution {
        value: std.objective(&res.x),
        mu_star,
        lambda_star,
        nu_star: res.nu,
        active_set,
        slack,
        eq_slack,
        iterations: res.iterations,
        form,
        std_lambda: res.lambda,
        std_active: res.active_in,
    })
}

/// Solves the QP at input `z`.
///
/// With `soft`, the hard problem is tried first; its solution is returned
/// (with zero slack) whenever every multiplier is within the exact-penalty
/// bound `ρ_lin`, which makes it the optimum of the softened problem too.
/// Otherwise the slack-augmented problem is solved.
pub fn solve(
    qp: &QpData,
    z: &DVector<f64>,
    pin: Option<&ActionPin>,
    soft: Option<&SoftConfig>,
) -> Result<QpSolution, QpError> {
    qp.validate(z)?;
    if let Some(p) = pin {
        if p.k.shape() != (p.u.len(), qp.n_mu()) {
            return Err(QpError::DimensionMismatch("pin".into()));
        }
    }
    let Some(s) = soft else {
        let std = StdForm::build(qp, z, pin, None, Form::Hard);
        return solve_form(&std, Form::Hard, false);
    };
    s.validate()?;

    let mut hard = StdForm::build(qp, z, pin, None, Form::Hard);
    hard.soft_eq = s.soften_equalities;
    match solve_form(&hard, Form::Hard, true) {
        Ok(sol) => {
            let lam_ok = sol.lambda_star.iter().all(|&l| l < s.rho_lin);
            let nu_ok = !s.soften_equalities || sol.nu_star.iter().all(|&v| v.abs() < s.rho_lin);
            if lam_ok && nu_ok {
                return Ok(sol);
            }
        }
        Err(QpError::Infeasible) | Err(QpError::MaxIterations) => {}
        Err(e) => return Err(e),
    }
    let aug = StdForm::build(qp, z, pin, Some(s), Form::Augmented);
    solve_form(&aug, Form::Augmented, true)
}

/// Max-norm of the stationarity, primal feasibility, dual feasibility and
/// complementarity residuals of `sol` for the problem it was produced from.
pub fn kkt_residual(
    qp: &QpData,
    z: &DVector<f64>,
    pin: Option<&ActionPin>,
    soft: Option<&SoftConfig>,
    sol: &QpSolution,
) -> f64 {
    let mut std = StdForm::build(qp, z, pin, soft, sol.form);
    if sol.form == Form::Hard {
        std.soft_eq = false;
    }
    let x = std.primal(sol);
    let mut lam = sol.std_lambda.clone();
    if lam.len() != std.h_in.len() {
        lam = DVector::zeros(std.h_in.len());
    }
    lam.rows_mut(0, std.m_in).copy_from(&sol.lambda_star);
    let nu = &sol.nu_star;

    let stat = &std.p * &x + &std.c - std.g_in.tr_mul(&lam) - std.g_eq.tr_mul(nu);
    let mut res = stat.amax();
    let slack = &std.h_in - &std.g_in * &x;
    for i in 0..slack.len() {
        res = res.max((-slack[i]).max(0.0));
        res = res.max((-lam[i]).max(0.0));
        res = res.max((lam[i] * slack[i]).abs());
    }
    if std.h_eq.len() > 0 {
        res = res.max((&std.g_eq * &x - &std.h_eq).amax());
    }
    res
}
