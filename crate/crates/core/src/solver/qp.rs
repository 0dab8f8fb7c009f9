//! Dense convex QP by a primal active-set method.
//!
//! ```text
//! min  1/2 x'Hx + g'x   s.t.  A_eq x = b_eq,  A_in x <= b_in
//! ```
//!
//! A feasible start comes from a phase-one problem in `(x, t)` that
//! minimizes the largest inequality violation `t` from the minimum-norm
//! solution of the equalities. Both phases share the same iteration; ties
//! in the add and drop rules are broken by lowest constraint index (Bland's
//! rule), which rules out cycling on degenerate vertices.
//!
//! Multipliers follow `L = f + lambda'(A_eq x - b_eq) + mu'(A_in x - b_in)`,
//! so stationarity reads `Hx + g + A_eq' lambda + A_in' mu = 0`, `mu >= 0`.

use nalgebra::{DMatrix, DVector};

use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_pivots: usize,
    /// Feasibility and optimality tolerance (scaled by problem data).
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_pivots: 200,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum QpFailure {
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("QP objective is unbounded below")]
    Unbounded,
    #[error("QP active-set pivot limit reached")]
    MaxPivots,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub dual_ineq: DVector<f64>,
    /// Inequality rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub pivots: usize,
}

/// Borrowed QP data.
#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

impl<'a> QpProblem<'a> {
    fn dims_ok(&self) -> bool {
        let n = self.g.len();
        self.h.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len()
    }
}

/// Convenience wrapper around [`solve_qp`] with default settings.
pub fn qp_solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<QpSolution, QpFailure> {
    solve_qp(
        &QpProblem {
            h,
            g,
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        &QpSettings::default(),
    )
}

/// Solve a QP whose Hessian is positive definite on the null space of the
/// equality constraints (semidefinite problems are handled when bounded).
pub fn solve_qp(problem: &QpProblem<'_>, settings: &QpSettings) -> Result<QpSolution, QpFailure> {
    assert!(problem.dims_ok(), "inconsistent QP dimensions");
    let n = problem.g.len();
    let scale_b = 1.0 + linalg::max_abs_vec(problem.b_eq).max(linalg::max_abs_vec(problem.b_in));
    let feas_tol = settings.tol * scale_b;

    // Independent subset of equality rows and the minimum-norm point on them.
    let eq_rows = independent_rows(problem.a_eq);
    let a_eq = select_rows(problem.a_eq, &eq_rows);
    let x_eq = if problem.a_eq.nrows() == 0 {
        DVector::zeros(n)
    } else {
        let svd = problem.a_eq.clone().svd(true, true);
        match svd.solve(problem.b_eq, 1e-14) {
            Ok(x) => x,
            Err(_) => return Err(QpFailure::Infeasible),
        }
    };
    if problem.a_eq.nrows() > 0
        && linalg::max_abs_vec(&(problem.a_eq * &x_eq - problem.b_eq)) > feas_tol
    {
        return Err(QpFailure::Infeasible);
    }

    // Rows with no dependence on x are either always satisfied or infeasible.
    let row_norms: Vec<f64> = (0..problem.a_in.nrows())
        .map(|i| problem.a_in.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let live: Vec<bool> = row_norms.iter().map(|&r| r > 1e-14).collect();
    for i in 0..problem.a_in.nrows() {
        if !live[i] && problem.b_in[i] < -feas_tol {
            return Err(QpFailure::Infeasible);
        }
    }

    let mut pivots = 0;
    let violation = max_violation(problem.a_in, problem.b_in, &x_eq, &live);
    let x_start = if violation <= feas_tol {
        x_eq
    } else {
        let (x, t, used) = phase_one(&a_eq, problem.a_in, problem.b_in, &live, &x_eq, violation, settings)?;
        pivots += used;
        if t > feas_tol {
            return Err(QpFailure::Infeasible);
        }
        x
    };

    let remaining = QpSettings {
        max_pivots: settings.max_pivots.saturating_sub(pivots),
        ..*settings
    };
    let core = ActiveSet {
        h: problem.h,
        g: problem.g,
        a_eq: &a_eq,
        a_in: problem.a_in,
        b_in: problem.b_in,
        live: &live,
        settings: &remaining,
    };
    let out = core.run(x_start, Vec::new())?;
    pivots += out.pivots;

    let mut dual_eq = DVector::zeros(problem.a_eq.nrows());
    for (j, &row) in eq_rows.iter().enumerate() {
        dual_eq[row] = out.eq_multipliers[j];
    }
    let mut dual_ineq = DVector::zeros(problem.a_in.nrows());
    let mut active_set = out.working.clone();
    for (j, &row) in out.working.iter().enumerate() {
        dual_ineq[row] = out.ineq_multipliers[j].max(0.0);
    }
    active_set.sort_unstable();
    Ok(QpSolution {
        x: out.x,
        dual_eq,
        dual_ineq,
        active_set,
        pivots,
    })
}

fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, live: &[bool]) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let r = a * x - b;
    (0..r.len())
        .filter(|&i| live[i])
        .fold(0.0_f64, |acc, i| acc.max(r[i]))
}

fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

/// Indices of a maximal linearly independent subset of the rows.
fn independent_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let rows = a.nrows();
    if rows == 0 {
        return Vec::new();
    }
    if linalg::rank(a, 1e-11) == rows {
        return (0..rows).collect();
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..rows {
        let mut candidate = kept.clone();
        candidate.push(i);
        if linalg::rank(&select_rows(a, &candidate), 1e-11) == candidate.len() {
            kept = candidate;
        }
    }
    kept
}

/// Phase one: `min t + eps/2 (|x - x_eq|^2 + t^2)` subject to the
/// equalities, `A_in x - t <= b_in` and `t >= 0`. Returns `(x, t, pivots)`.
fn phase_one(
    a_eq: &DMatrix<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    live: &[bool],
    x_eq: &DVector<f64>,
    t0: f64,
    settings: &QpSettings,
) -> Result<(DVector<f64>, f64, usize), QpFailure> {
    let n = x_eq.len();
    let eps = 1e-8;
    let h = DMatrix::identity(n + 1, n + 1) * eps;
    let mut g = DVector::zeros(n + 1);
    g.rows_mut(0, n).copy_from(&(x_eq * -eps));
    g[n] = 1.0;
    let mut a_eq1 = DMatrix::zeros(a_eq.nrows(), n + 1);
    a_eq1.view_mut((0, 0), (a_eq.nrows(), n)).copy_from(a_eq);
    let m_in = a_in.nrows();
    let mut a_in1 = DMatrix::zeros(m_in + 1, n + 1);
    a_in1.view_mut((0, 0), (m_in, n)).copy_from(a_in);
    for i in 0..m_in {
        a_in1[(i, n)] = -1.0;
    }
    a_in1[(m_in, n)] = -1.0;
    let mut b_in1 = DVector::zeros(m_in + 1);
    b_in1.rows_mut(0, m_in).copy_from(b_in);
    let mut live1 = live.to_vec();
    live1.push(true);
    let mut y0 = DVector::zeros(n + 1);
    y0.rows_mut(0, n).copy_from(x_eq);
    y0[n] = t0;
    let core = ActiveSet {
        h: &h,
        g: &g,
        a_eq: &a_eq1,
        a_in: &a_in1,
        b_in: &b_in1,
        live: &live1,
        settings,
    };
    let out = core.run(y0, Vec::new())?;
    let t = out.x[n];
    Ok((out.x.rows(0, n).into_owned(), t.max(0.0), out.pivots))
}

struct ActiveSet<'a> {
    h: &'a DMatrix<f64>,
    g: &'a DVector<f64>,
    /// Independent equality rows (always in the working set).
    a_eq: &'a DMatrix<f64>,
    a_in: &'a DMatrix<f64>,
    b_in: &'a DVector<f64>,
    live: &'a [bool],
    settings: &'a QpSettings,
}

struct ActiveSetOutcome {
    x: DVector<f64>,
    eq_multipliers: DVector<f64>,
    working: Vec<usize>,
    ineq_multipliers: DVector<f64>,
    pivots: usize,
}

enum Direction {
    /// Newton step to the minimizer on the working set, with its multipliers.
    Newton(DVector<f64>, DVector<f64>),
    /// Descent direction of zero curvature (singular reduced Hessian).
    Ray(DVector<f64>),
}

impl<'a> ActiveSet<'a> {
    fn working_matrix(&self, working: &[usize]) -> DMatrix<f64> {
        let n = self.g.len();
        let ne = self.a_eq.nrows();
        let mut a = DMatrix::zeros(ne + working.len(), n);
        a.view_mut((0, 0), (ne, n)).copy_from(self.a_eq);
        for (j, &i) in working.iter().enumerate() {
            a.row_mut(ne + j).copy_from(&self.a_in.row(i));
        }
        a
    }

    fn direction(&self, x: &DVector<f64>, working: &[usize]) -> Direction {
        let n = x.len();
        let aw = self.working_matrix(working);
        let k = aw.nrows();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(self.h);
        kkt.view_mut((0, n), (n, k)).copy_from(&aw.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(&aw);
        let grad = self.h * x + self.g;
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&grad));

        // Residuals are judged relative to |K| |sol| + |rhs|, so badly scaled
        // but nonsingular systems (phase one) are accepted.
        let k_norm = linalg::max_abs(&kkt);
        let scale = |sol: &DVector<f64>| 1.0 + linalg::max_abs_vec(&rhs) + k_norm * linalg::max_abs_vec(sol);
        if let Some(sol) = kkt.clone().lu().solve(&rhs) {
            if linalg::all_finite(&sol) && linalg::max_abs_vec(&(&kkt * &sol - &rhs)) <= 1e-10 * scale(&sol) {
                return Direction::Newton(sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned());
            }
        }
        // Singular system: least-squares solve; if inconsistent, move along
        // the zero-curvature part of the negative gradient.
        let svd = kkt.clone().svd(true, true);
        if let Ok(sol) = svd.solve(&rhs, 1e-12) {
            if linalg::max_abs_vec(&(&kkt * &sol - &rhs)) <= 1e-8 * scale(&sol) {
                return Direction::Newton(sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned());
            }
        }
        let null = linalg::null_space(&kkt, 1e-12);
        let mut ray = DVector::zeros(n);
        for c in 0..null.ncols() {
            let p = null.column(c).rows(0, n).into_owned();
            ray -= &p * p.dot(&grad);
        }
        Direction::Ray(ray)
    }

    fn run(&self, mut x: DVector<f64>, mut working: Vec<usize>) -> Result<ActiveSetOutcome, QpFailure> {
        let n = x.len();
        let ne = self.a_eq.nrows();
        let data_scale = 1.0 + linalg::max_abs_vec(self.g).max(linalg::max_abs(self.h));
        let mult_tol = 1e-10 * data_scale;
        let mut pivots = 0;
        // A full unblocked step reaches the working-set minimizer; on an
        // ill-conditioned system the next direction need not be tiny.
        let mut landed = false;
        loop {
            if pivots > self.settings.max_pivots {
                return Err(QpFailure::MaxPivots);
            }
            match self.direction(&x, &working) {
                Direction::Newton(p, nu) => {
                    let step_tol = 1e-12 * (1.0 + linalg::max_abs_vec(&x));
                    if landed || linalg::max_abs_vec(&p) <= step_tol {
                        // Stationary on the working set: check inequality multipliers.
                        let ineq_nu = nu.rows(ne, working.len()).into_owned();
                        let drop = working
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| ineq_nu[*j] < -mult_tol)
                            .min_by_key(|(_, &row)| row)
                            .map(|(j, _)| j);
                        match drop {
                            None => {
                                if !landed {
                                    x += &p;
                                }
                                return Ok(ActiveSetOutcome {
                                    x,
                                    eq_multipliers: nu.rows(0, ne).into_owned(),
                                    working,
                                    ineq_multipliers: ineq_nu,
                                    pivots,
                                });
                            }
                            Some(j) => {
                                working.remove(j);
                                pivots += 1;
                                landed = false;
                            }
                        }
                    } else {
                        let (alpha, blocking) = self.ratio_test(&x, &p, &working, 1.0);
                        x += &p * alpha;
                        match blocking {
                            Some(i) => {
                                working.push(i);
                                pivots += 1;
                            }
                            None => landed = true,
                        }
                    }
                }
                Direction::Ray(d) => {
                    if linalg::max_abs_vec(&d) <= 1e-14 * (1.0 + linalg::max_abs_vec(&x)) {
                        return Err(QpFailure::Unbounded);
                    }
                    let (alpha, blocking) = self.ratio_test(&x, &d, &working, f64::INFINITY);
                    match blocking {
                        Some(i) => {
                            x += &d * alpha;
                            working.push(i);
                            pivots += 1;
                        }
                        None => return Err(QpFailure::Unbounded),
                    }
                }
            }
            debug_assert_eq!(x.len(), n);
        }
    }

    /// Largest step in `[0, cap]` along `p` keeping inactive rows feasible;
    /// ties resolved to the lowest row index.
    fn ratio_test(&self, x: &DVector<f64>, p: &DVector<f64>, working: &[usize], cap: f64) -> (f64, Option<usize>) {
        let mut alpha = cap;
        let mut blocking = None;
        let p_scale = linalg::max_abs_vec(p);
        for i in 0..self.a_in.nrows() {
            if !self.live[i] || working.contains(&i) {
                continue;
            }
            let row = self.a_in.row(i);
            let ap = row.dot(&p.transpose());
            if ap <= 1e-14 * p_scale * (1.0 + row.iter().fold(0.0_f64, |a, v| a.max(v.abs()))) {
                continue;
            }
            let slack = (self.b_in[i] - row.dot(&x.transpose())).max(0.0);
            let step = slack / ap;
            if step < alpha {
                alpha = step;
                blocking = Some(i);
            }
        }
        (alpha, blocking)
    }
}
