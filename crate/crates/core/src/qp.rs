//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x'Hx + f'x
//! subject to  A_eq x  = b_eq
//!             lb <= A_in x <= ub
//! ```
//!
//! with the Goldfarb-Idnani dual active-set method. The factorization of the
//! active constraint normals is updated with Givens rotations, so adding or
//! dropping a constraint costs O(n^2). Positive semidefinite Hessians are
//! handled by an outer proximal-point loop on `H + rho I`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("qp not converged after {0} iterations")]
    NotConverged(usize),
    #[error("infeasible")]
    Infeasible,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not positive semidefinite")]
    NotConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub kkt_tol: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iterations: 5000,
        }
    }
}

/// Convex QP in dense form. Unbounded sides of `lb`/`ub` are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Constant added to the reported objective.
    pub constant: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            constant: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb: DVector::zeros(0),
            ub: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x + &self.linear
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let dims = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return dims("hessian");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return dims("equality block");
        }
        if self.a_in.ncols() != n
            || self.a_in.nrows() != self.lb.len()
            || self.a_in.nrows() != self.ub.len()
        {
            return dims("inequality block");
        }
        let scale = self.hessian.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.hessian[(i, j)] - self.hessian[(j, i)]).abs() > 1e-12 * scale {
                    return Err(QpError::Dimension(format!("hessian asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x`.
    pub fn primal_infeasibility(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        let ax = &self.a_in * x;
        let mut worst: f64 = eq;
        for i in 0..ax.len() {
            worst = worst.max(self.lb[i] - ax[i]).max(ax[i] - self.ub[i]);
        }
        worst.max(0.0)
    }

    pub fn dump(&self) -> QpDump {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        let finite = |v: &DVector<f64>| v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        QpDump {
            hessian: rows(&self.hessian),
            linear: self.linear.iter().copied().collect(),
            constant: self.constant,
            a_eq: rows(&self.a_eq),
            b_eq: self.b_eq.iter().copied().collect(),
            a_in: rows(&self.a_in),
            lb: finite(&self.lb),
            ub: finite(&self.ub),
        }
    }

    pub fn from_dump(d: &QpDump) -> Result<Self, QpError> {
        let n = d.linear.len();
        let mat = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>, QpError> {
            if rows.iter().any(|r| r.len() != n) {
                return Err(QpError::Dimension("row length".into()));
            }
            Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
        };
        let bound = |v: &[Option<f64>], inf: f64| DVector::from_iterator(v.len(), v.iter().map(|x| x.unwrap_or(inf)));
        let p = Self {
            hessian: mat(&d.hessian)?,
            linear: DVector::from_vec(d.linear.clone()),
            constant: d.constant,
            a_eq: mat(&d.a_eq)?,
            b_eq: DVector::from_vec(d.b_eq.clone()),
            a_in: mat(&d.a_in)?,
            lb: bound(&d.lb, f64::NEG_INFINITY),
            ub: bound(&d.ub, f64::INFINITY),
        };
        p.validate()?;
        Ok(p)
    }
}

/// JSON-friendly mirror of [`QpProblem`]; missing bounds are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDump {
    pub hessian: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<f64>>,
    pub lb: Vec<Option<f64>>,
    pub ub: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows.
    pub eq_multipliers: DVector<f64>,
    /// Signed multipliers of the inequality rows: positive when the lower
    /// bound is active, negative when the upper bound is.
    pub in_multipliers: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Eq,
    Lower,
    Upper,
}

/// One-sided constraint `normal . x >= rhs` (or `=` for equalities).
struct Row {
    source: usize,
    side: Side,
    rhs: f64,
}

struct Normals {
    rows: Vec<Row>,
    // constraint normals stored column-wise for contiguous dot products
    mat: DMatrix<f64>,
}

impl Normals {
    fn build(p: &QpProblem) -> Self {
        let n = p.dim();
        let mut rows = Vec::new();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for i in 0..p.a_eq.nrows() {
            rows.push(Row { source: i, side: Side::Eq, rhs: p.b_eq[i] });
            cols.push(p.a_eq.row(i).transpose());
        }
        for i in 0..p.a_in.nrows() {
            let a = p.a_in.row(i).transpose();
            if p.lb[i].is_finite() {
                rows.push(Row { source: i, side: Side::Lower, rhs: p.lb[i] });
                cols.push(a.clone());
            }
            if p.ub[i].is_finite() {
                rows.push(Row { source: i, side: Side::Upper, rhs: -p.ub[i] });
                cols.push(-a);
            }
        }
        let mat = if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Self { rows, mat }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let n = m.nrows();
    for k in 0..n {
        let a = m[(k, i)];
        let b = m[(k, j)];
        m[(k, i)] = c * a + s * b;
        m[(k, j)] = -s * a + c * b;
    }
}

struct DualActiveSet<'a> {
    normals: &'a Normals,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    // sign applied to equality normals so they enter with a violation
    flip: Vec<f64>,
    u: Vec<f64>,
    x: DVector<f64>,
    iterations: usize,
}

impl<'a> DualActiveSet<'a> {
    fn normal(&self, c: usize) -> DVector<f64> {
        self.normals.mat.column(c) * self.flip[c]
    }

    fn slack(&self, c: usize) -> f64 {
        self.flip[c] * (self.normals.mat.column(c).dot(&self.x) - self.normals.rows[c].rhs)
    }

    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.active.len();
        for k in (q + 1..n).rev() {
            let (c, s, r) = givens(d[k - 1], d[k]);
            if s == 0.0 {
                continue;
            }
            d[k - 1] = r;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
    }

    fn drop(&mut self, k: usize) {
        let q = self.active.len();
        for col in k..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for col in k..q - 1 {
            let (c, s, rr) = givens(self.r[(col, col)], self.r[(col + 1, col)]);
            if s != 0.0 {
                self.r[(col, col)] = rr;
                self.r[(col + 1, col)] = 0.0;
                for jj in col + 1..q - 1 {
                    let a = self.r[(col, jj)];
                    let b = self.r[(col + 1, jj)];
                    self.r[(col, jj)] = c * a + s * b;
                    self.r[(col + 1, jj)] = -s * a + c * b;
                }
                rotate_columns(&mut self.j, col, col + 1, c, s);
            }
        }
        self.active.remove(k);
        self.u.remove(k);
    }

    /// Back-substitution with the leading `q x q` block of R.
    fn solve_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.active.len();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    /// Adds constraint `p` to the active set, dropping blocking
    /// inequalities on the way.
    fn enforce(&mut self, p: usize, max_iterations: usize, feas_tol: f64) -> Result<(), QpError> {
        let n = self.x.len();
        let is_eq = self.normals.rows[p].side == Side::Eq;
        let np = self.normal(p);
        let mut u_plus = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > max_iterations {
                return Err(QpError::NotConverged(max_iterations));
            }
            let q = self.active.len();
            let d = self.j.tr_mul(&np);
            let mut z = DVector::zeros(n);
            for k in q..n {
                if d[k] != 0.0 {
                    z.axpy(d[k], &self.j.column(k), 1.0);
                }
            }
            let r = self.solve_r(&d);
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 && self.normals.rows[self.active[k]].side != Side::Eq {
                    let ratio = self.u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        block = Some(k);
                    }
                }
            }
            let s_p = self.slack(p);
            let ztn = z.dot(&np);
            let dependent = z.amax() <= 1e-12 * (1.0 + np.amax());
            let t2 = if dependent || ztn <= 0.0 { f64::INFINITY } else { -s_p / ztn };
            if t1.is_infinite() && t2.is_infinite() {
                if is_eq && s_p.abs() <= feas_tol {
                    // redundant equality
                    return Ok(());
                }
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                for k in 0..q {
                    self.u[k] -= t1 * r[k];
                }
                u_plus += t1;
                self.drop(block.unwrap());
                continue;
            }
            let t = t1.min(t2);
            self.x.axpy(t, &z, 1.0);
            for k in 0..q {
                self.u[k] -= t * r[k];
            }
            u_plus += t;
            if t2 <= t1 {
                self.add(d);
                self.active.push(p);
                self.u.push(u_plus);
                return Ok(());
            }
            self.drop(block.unwrap());
        }
    }
}

fn solve_strict(
    p: &QpProblem,
    normals: &Normals,
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    settings: &QpSettings,
) -> Result<(DVector<f64>, Vec<(usize, f64)>, usize), QpError> {
    let n = p.dim();
    let chol = hessian.clone().cholesky().ok_or(QpError::NotConvex)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotConvex)?;
    let m = normals.rows.len();
    let scale = 1.0 + linear.amax();
    let feas_tol = 1e-11 * scale.max(normals.mat.amax());
    let mut st = DualActiveSet {
        normals,
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        flip: vec![1.0; m],
        u: Vec::new(),
        x: chol.solve(&(-linear)),
        iterations: 0,
    };
    for c in 0..m {
        if normals.rows[c].side != Side::Eq {
            break;
        }
        if st.slack(c) > 0.0 {
            st.flip[c] = -1.0;
        }
        st.enforce(c, settings.max_iterations, feas_tol)?;
    }
    loop {
        let mut is_active = vec![false; m];
        for &c in &st.active {
            is_active[c] = true;
        }
        let mut worst = None;
        let mut worst_s = 0.0;
        for c in 0..m {
            if normals.rows[c].side == Side::Eq || is_active[c] {
                continue;
            }
            let s = st.slack(c);
            let tol = feas_tol * (1.0 + normals.rows[c].rhs.abs());
            if s < -tol && s < worst_s {
                worst_s = s;
                worst = Some(c);
            }
        }
        let Some(c) = worst else { break };
        st.enforce(c, settings.max_iterations, feas_tol)?;
    }
    let multipliers = st
        .active
        .iter()
        .zip(&st.u)
        .map(|(&c, &u)| (c, u * st.flip[c]))
        .collect();
    Ok((st.x, multipliers, st.iterations))
}

thread_local! {
    static SOLVE_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of [`solve_qp`] calls made on the current thread.
pub fn solve_calls() -> u64 {
    SOLVE_CALLS.with(|c| c.get())
}

/// Solves a convex QP and certifies the result with its KKT residual.
pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    SOLVE_CALLS.with(|c| c.set(c.get() + 1));
    p.validate()?;
    let n = p.dim();
    let normals = Normals::build(p);
    let strict = p.hessian.clone().cholesky().is_some_and(|c| {
        let d = c.l().diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        lo > 1e-7 * hi
    });
    let (x, mult, iterations) = if strict {
        solve_strict(p, &normals, &p.hessian, &p.linear, settings)?
    } else {
        let rho = 1e-6 * p.hessian.diagonal().amax().max(1.0);
        let h = &p.hessian + DMatrix::identity(n, n) * rho;
        let mut x = DVector::zeros(n);
        let mut total = 0;
        let mut last = None;
        for _ in 0..2000 {
            let f = &p.linear - &x * rho;
            let (nx, mult, it) = solve_strict(p, &normals, &h, &f, settings)?;
            total += it;
            let step = (&nx - &x).amax();
            x = nx;
            last = Some(mult);
            if step <= 1e-12 * (1.0 + x.amax()) {
                break;
            }
        }
        (x, last.unwrap(), total)
    };
    let mut eq_m = DVector::zeros(p.a_eq.nrows());
    let mut in_m = DVector::zeros(p.a_in.nrows());
    for (c, u) in mult {
        let row = &normals.rows[c];
        match row.side {
            Side::Eq => eq_m[row.source] += u,
            Side::Lower => in_m[row.source] += u,
            Side::Upper => in_m[row.source] -= u,
        }
    }
    let kkt_residual = kkt_residual(p, &x, &eq_m, &in_m);
    if !(kkt_residual <= settings.kkt_tol) {
        log::debug!("qp kkt residual {kkt_residual:e} above tolerance");
        return Err(QpError::NotConverged(iterations));
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        eq_multipliers: eq_m,
        in_multipliers: in_m,
        kkt_residual,
        iterations,
    })
}

/// Maximum of relative stationarity error, primal infeasibility, dual
/// infeasibility and complementary slackness.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, eq_m: &DVector<f64>, in_m: &DVector<f64>) -> f64 {
    let hx = &p.hessian * x;
    let at_mu = p.a_eq.tr_mul(eq_m);
    let at_lambda = p.a_in.tr_mul(in_m);
    let stat = (&hx + &p.linear - &at_mu - &at_lambda).amax();
    let scale = 1.0 + hx.amax().max(p.linear.amax()).max(at_mu.amax()).max(at_lambda.amax());
    let ax = &p.a_in * x;
    let mut comp: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for i in 0..ax.len() {
        let l = in_m[i];
        if l > 0.0 {
            if p.lb[i].is_finite() {
                comp = comp.max(l * (ax[i] - p.lb[i]).abs());
            } else {
                dual = dual.max(l);
            }
        } else if l < 0.0 {
            if p.ub[i].is_finite() {
                comp = comp.max(-l * (p.ub[i] - ax[i]).abs());
            } else {
                dual = dual.max(-l);
            }
        }
    }
    (stat / scale)
        .max(p.primal_infeasibility(x))
        .max(comp)
        .max(dual)
}
