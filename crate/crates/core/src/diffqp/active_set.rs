//! Dual active-set solver (Goldfarb-Idnani) for strictly concave QPs.
//!
//! Works on the maximization form
//!
//! ```text
//! max ½xᵀPx + cᵀx   s.t.  G_in x ≤ h_in,  G_eq x = h_eq
//! ```
//!
//! with `-P` positive definite. Internally the minimization form
//! `min ½xᵀGx + aᵀx` with `G = -P`, `a = -c` is used, and every constraint is
//! written as `nᵀx ≥ b` (equalities are added first and never dropped).
//!
//! The factorization keeps `J = L⁻ᵀ·Qᵀ` and an upper-triangular `R` such that
//! `Jᵀ·N_active = [R; 0]`, updated with Givens rotations on every add/drop.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActiveSetError {
    NotConcave,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub(crate) struct ActiveSetResult {
    pub x: DVector<f64>,
    /// Multipliers of the inequality rows (max-form convention, ≥ 0).
    pub lambda: DVector<f64>,
    /// Multipliers of the equality rows (max-form convention, free sign).
    pub nu: DVector<f64>,
    /// Indices of inequality rows in the final working set.
    pub active_in: Vec<usize>,
    pub iterations: usize,
}

struct Constraints {
    /// Column `i` is the normal of constraint `i` in `nᵀx ≥ b` form.
    normals: DMatrix<f64>,
    rhs: DVector<f64>,
    norms: Vec<f64>,
    m_eq: usize,
}

impl Constraints {
    fn new(g_in: &DMatrix<f64>, h_in: &DVector<f64>, g_eq: &DMatrix<f64>, h_eq: &DVector<f64>) -> Self {
        let n = g_in.ncols().max(g_eq.ncols());
        let m_eq = g_eq.nrows();
        let m = m_eq + g_in.nrows();
        let mut normals = DMatrix::zeros(n, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..m_eq {
            normals.set_column(i, &g_eq.row(i).transpose());
            rhs[i] = h_eq[i];
        }
        for i in 0..g_in.nrows() {
            normals.set_column(m_eq + i, &(-g_in.row(i).transpose()));
            rhs[m_eq + i] = -h_in[i];
        }
        let norms = (0..m).map(|i| normals.column(i).norm()).collect();
        Self { normals, rhs, norms, m_eq }
    }

    fn len(&self) -> usize {
        self.rhs.len()
    }

    fn slack(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.normals.column(i).dot(x) - self.rhs[i]
    }

    fn tolerance(&self, i: usize, x: &DVector<f64>) -> f64 {
        1e-11 * (1.0 + self.rhs[i].abs() + self.norms[i] * x.amax())
    }
}

fn rotation(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    (h, a / h, b / h)
}

fn rotate_columns(m: &mut DMatrix<f64>, c1: usize, c2: usize, cs: f64, sn: f64) {
    for row in 0..m.nrows() {
        let x1 = m[(row, c1)];
        let x2 = m[(row, c2)];
        m[(row, c1)] = cs * x1 + sn * x2;
        m[(row, c2)] = -sn * x1 + cs * x2;
    }
}

struct WorkingSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Constraint index, sign applied to its normal.
    members: Vec<(usize, f64)>,
    mult: Vec<f64>,
}

impl WorkingSet {
    fn len(&self) -> usize {
        self.members.len()
    }

    fn add(&mut self, mut d: DVector<f64>, constraint: usize, sign: f64, mult: f64) {
        let n = self.j.nrows();
        let q = self.len();
        for jj in ((q + 1)..n).rev() {
            if d[jj] == 0.0 {
                continue;
            }
            let (h, cs, sn) = rotation(d[jj - 1], d[jj]);
            d[jj - 1] = h;
            d[jj] = 0.0;
            rotate_columns(&mut self.j, jj - 1, jj, cs, sn);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.members.push((constraint, sign));
        self.mult.push(mult);
    }

    fn drop(&mut self, pos: usize) {
        let q = self.len();
        for col in pos..q - 1 {
            for row in 0..=(col + 1) {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in pos..q.saturating_sub(1) {
            let b = self.r[(col + 1, col)];
            if b == 0.0 {
                continue;
            }
            let (h, cs, sn) = rotation(self.r[(col, col)], b);
            self.r[(col, col)] = h;
            self.r[(col + 1, col)] = 0.0;
            for cc in (col + 1)..(q - 1) {
                let x1 = self.r[(col, cc)];
                let x2 = self.r[(col + 1, cc)];
                self.r[(col, cc)] = cs * x1 + sn * x2;
                self.r[(col + 1, cc)] = -sn * x1 + cs * x2;
            }
            rotate_columns(&mut self.j, col, col + 1, cs, sn);
        }
        self.members.remove(pos);
        self.mult.remove(pos);
    }
}

/// Solves the concave QP. Deterministic: ties in the pricing step resolve to
/// the lowest constraint index.
pub(crate) fn solve_max(
    p: &DMatrix<f64>,
    c: &DVector<f64>,
    g_in: &DMatrix<f64>,
    h_in: &DVector<f64>,
    g_eq: &DMatrix<f64>,
    h_eq: &DVector<f64>,
) -> Result<ActiveSetResult, ActiveSetError> {
    let n = c.len();
    let g = -p;
    let chol = Cholesky::new(g).ok_or(ActiveSetError::NotConcave)?;
    let j = chol
        .l()
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(ActiveSetError::NotConcave)?;
    let mut x = chol.solve(c);

    let cons = Constraints::new(g_in, h_in, g_eq, h_eq);
    let m = cons.len();
    let m_eq = cons.m_eq;
    let mut ws = WorkingSet {
        j,
        r: DMatrix::zeros(n, n.max(1)),
        members: Vec::with_capacity(n),
        mult: Vec::with_capacity(n),
    };
    let mut in_set = vec![false; m];
    let mut next_eq = 0;
    let max_iter = 50 * (n + m) + 100;
    let mut iterations = 0;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(ActiveSetError::MaxIterations);
        }

        let (p_idx, sign) = if next_eq < m_eq {
            let i = next_eq;
            next_eq += 1;
            let s = cons.slack(i, &x);
            (i, if s > 0.0 { -1.0 } else { 1.0 })
        } else {
            let mut best: Option<(usize, f64)> = None;
            for i in m_eq..m {
                if in_set[i] {
                    continue;
                }
                let s = cons.slack(i, &x);
                if s < -cons.tolerance(i, &x) && best.is_none_or(|(_, bs)| s < bs) {
                    best = Some((i, s));
                }
            }
            match best {
                None => break 'outer,
                Some((i, _)) => (i, 1.0),
            }
        };

        let np = cons.normals.column(p_idx) * sign;
        let bp = cons.rhs[p_idx] * sign;
        let mut mult_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(ActiveSetError::MaxIterations);
            }
            let q = ws.len();
            let d = ws.j.tr_mul(&np);
            let d2 = d.rows(q, n - q);
            let z = ws.j.columns(q, n - q) * d2;
            let rvec = if q > 0 {
                ws.r
                    .view((0, 0), (q, q))
                    .solve_upper_triangular(&d.rows(0, q).into_owned())
                    .ok_or(ActiveSetError::Infeasible)?
            } else {
                DVector::zeros(0)
            };

            let mut t1 = f64::INFINITY;
            let mut drop_pos = None;
            for (pos, &(ci, _)) in ws.members.iter().enumerate() {
                if ci >= m_eq && rvec[pos] > 0.0 {
                    let ratio = ws.mult[pos] / rvec[pos];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_pos = Some(pos);
                    }
                }
            }

            let s_p = np.dot(&x) - bp;
            let d2_norm = d2.norm();
            let degenerate = d2_norm <= 1e-11 * d.norm().max(1e-300);
            let t2 = if degenerate {
                f64::INFINITY
            } else {
                -s_p / (d2_norm * d2_norm)
            };

            if degenerate {
                if p_idx < m_eq && s_p.abs() <= cons.tolerance(p_idx, &x) {
                    // linearly dependent, already satisfied equality
                    continue 'outer;
                }
                let Some(pos) = drop_pos else {
                    return Err(ActiveSetError::Infeasible);
                };
                for (k, mk) in ws.mult.iter_mut().enumerate() {
                    *mk -= t1 * rvec[k];
                }
                mult_p += t1;
                ws.mult[pos] = 0.0;
                in_set[ws.members[pos].0] = false;
                ws.drop(pos);
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (k, mk) in ws.mult.iter_mut().enumerate() {
                *mk -= t * rvec[k];
            }
            mult_p += t;

            if t2 <= t1 {
                ws.add(d, p_idx, sign, mult_p);
                in_set[p_idx] = true;
                continue 'outer;
            }
            let pos = drop_pos.expect("finite t1 has a blocking constraint");
            in_set[ws.members[pos].0] = false;
            ws.drop(pos);
        }
    }

    let mut lambda = DVector::zeros(g_in.nrows());
    let mut nu = DVector::zeros(m_eq);
    let mut active_in = Vec::new();
    for (&(ci, sign), &u) in ws.members.iter().zip(&ws.mult) {
        if ci < m_eq {
            nu[ci] = -sign * u;
        } else {
            lambda[ci - m_eq] = u.max(0.0);
            active_in.push(ci - m_eq);
        }
    }
    active_in.sort_unstable();
    Ok(ActiveSetResult {
        x,
        lambda,
        nu,
        active_in,
        iterations,
    })
}
