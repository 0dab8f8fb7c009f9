//! Exact dynamic-programming oracles.
//!
//! Tabular value iteration on a [`TabularMdp`] and the discounted algebraic
//! Riccati equation for linear-quadratic problems. Both are used as ground
//! truth for the optimization-based approximators elsewhere in the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{DiscountConfig, TabularMdp};

/// Stopping cap for [`value_iteration`].
pub const VALUE_ITERATION_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ(pub DMatrix<f64>);

impl TabularQ {
    pub fn zeros(mdp: &TabularMdp) -> Self {
        Self(DMatrix::zeros(mdp.n_states(), mdp.n_actions()))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `max_a Q[s][a]`
    pub fn state_values(&self) -> DVector<f64> {
        DVector::from_fn(self.0.nrows(), |s, _| {
            self.0.row(s).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        })
    }

    /// `||self - other||_inf`
    pub fn sup_distance(&self, other: &TabularQ) -> f64 {
        linalg::max_abs(&(&self.0 - &other.0))
    }
}

fn check_shape(q: &TabularQ, mdp: &TabularMdp) -> Result<()> {
    if q.0.nrows() != mdp.n_states() {
        return Err(Error::dim("Q-table states", mdp.n_states(), q.0.nrows()));
    }
    if q.0.ncols() != mdp.n_actions() {
        return Err(Error::dim("Q-table actions", mdp.n_actions(), q.0.ncols()));
    }
    Ok(())
}

/// One application of the Bellman optimality operator.
pub fn bellman_backup(q: &TabularQ, mdp: &TabularMdp) -> Result<TabularQ> {
    check_shape(q, mdp)?;
    let gamma = mdp.gamma().gamma();
    let v = q.state_values();
    let out = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        let expect: f64 = mdp
            .transition_row(s, a)
            .iter()
            .zip(v.iter())
            .map(|(p, v)| p * v)
            .sum();
        mdp.reward(s, a) + gamma * expect
    });
    Ok(TabularQ(out))
}

/// `||T Q - Q||_inf`
pub fn bellman_residual(q: &TabularQ, mdp: &TabularMdp) -> Result<f64> {
    Ok(bellman_backup(q, mdp)?.sup_distance(q))
}

#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub q: TabularQ,
    pub iterations: usize,
    pub residual: f64,
}

/// Iterate the Bellman backup from `Q = 0` until the sup-norm residual of
/// the returned table is at most `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueIterationResult> {
    value_iteration_capped(mdp, tol, VALUE_ITERATION_MAX_ITERS)
}

pub fn value_iteration_capped(
    mdp: &TabularMdp,
    tol: f64,
    max_iters: usize,
) -> Result<ValueIterationResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut q = TabularQ::zeros(mdp);
    let mut next = bellman_backup(&q, mdp)?;
    let mut residual = next.sup_distance(&q);
    let mut iterations = 0;
    while residual > tol {
        if iterations >= max_iters {
            return Err(Error::NonConvergence {
                what: "value iteration",
                iterations,
                residual,
            });
        }
        q = next;
        next = bellman_backup(&q, mdp)?;
        residual = next.sup_distance(&q);
        iterations += 1;
    }
    Ok(ValueIterationResult {
        q,
        iterations,
        residual,
    })
}

/// Greedy action per state; ties go to the lowest index.
pub fn greedy_policy_tabular(q: &TabularQ) -> Vec<usize> {
    (0..q.0.nrows())
        .map(|s| {
            let row = q.0.row(s);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// State values of a deterministic policy by a direct linear solve of
/// `(I - gamma P_pi) v = r_pi`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &[usize]) -> Result<DVector<f64>> {
    let n = mdp.n_states();
    if policy.len() != n {
        return Err(Error::dim("policy", n, policy.len()));
    }
    let gamma = mdp.gamma().gamma();
    let mut lhs = DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for s in 0..n {
        let a = policy[s];
        if a >= mdp.n_actions() {
            return Err(Error::InvalidArgument(format!("action {a} out of range at state {s}")));
        }
        for (j, p) in mdp.transition_row(s, a).iter().enumerate() {
            lhs[(s, j)] -= gamma * p;
        }
        rhs[s] = mdp.reward(s, a);
    }
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("singular policy evaluation system".into()))
}

/// `Q^pi(s, a) = r(s, a) + gamma sum_s' P v^pi(s')`.
pub fn policy_q(mdp: &TabularMdp, policy: &[usize]) -> Result<TabularQ> {
    let v = evaluate_policy(mdp, policy)?;
    let gamma = mdp.gamma().gamma();
    Ok(TabularQ(DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        mdp.reward(s, a)
            + gamma
                * mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(v.iter())
                    .map(|(p, v)| p * v)
                    .sum::<f64>()
    })))
}

/// Solution of the discounted LQ problem `min sum gamma^t (x'Qx + u'Ru)`,
/// `x+ = Ax + Bu`. Optimal input `u = -K x`, cost-to-go `x'Px`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub gamma: DiscountConfig,
    pub iterations: usize,
    /// Max-abs residual of the Riccati map at `p`.
    pub residual: f64,
}

const RICCATI_TOL: f64 = 1e-11;
const RICCATI_MAX_ITERS: usize = 200_000;

fn riccati_gain(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Option<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let lhs = r + &bt_p * b * gamma;
    let rhs = &bt_p * a * gamma;
    lhs.lu().solve(&rhs)
}

/// The discounted Riccati map `Q + g A'PA - g^2 A'PB (R + g B'PB)^-1 B'PA`.
pub fn riccati_map(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Option<DMatrix<f64>> {
    let k = riccati_gain(p, a, b, r, gamma)?;
    let at_p = a.transpose() * p;
    let next = q + (&at_p * a) * gamma - (&at_p * b * gamma) * k;
    Some(linalg::symmetrize(&next))
}

fn check_lq_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::dim("A columns", n, a.ncols()));
    }
    if b.nrows() != n {
        return Err(Error::dim("B rows", n, b.nrows()));
    }
    let m = b.ncols();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dim("Q size", n, q.nrows()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::dim("R size", m, r.nrows()));
    }
    Ok(())
}

/// Fixed-point iteration of the discounted Riccati map from `P = Q`. If the
/// plain iteration blows up, it is restarted with under-relaxation.
pub fn riccati_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: DiscountConfig,
) -> Result<RiccatiSolution> {
    check_lq_dims(a, b, q, r)?;
    if !linalg::is_symmetric(q, 1e-12) || linalg::min_eigenvalue(q) < -1e-12 {
        return Err(Error::InvalidArgument("Q must be symmetric positive semidefinite".into()));
    }
    if !linalg::is_symmetric(r, 1e-12) || linalg::min_eigenvalue(r) <= 0.0 {
        return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
    }
    let g = gamma.gamma();
    let mut last_residual = f64::INFINITY;
    for relax in [1.0, 0.5, 0.25] {
        let mut p = q.clone();
        let mut iterations = 0;
        let mut diverged = false;
        while iterations < RICCATI_MAX_ITERS {
            let Some(mapped) = riccati_map(&p, a, b, q, r, g) else {
                diverged = true;
                break;
            };
            let step = linalg::max_abs(&(&mapped - &p));
            p = if relax == 1.0 {
                mapped
            } else {
                &p * (1.0 - relax) + mapped * relax
            };
            iterations += 1;
            if !step.is_finite() || linalg::max_abs(&p) > 1e15 {
                diverged = true;
                break;
            }
            last_residual = step;
            if step <= RICCATI_TOL * (1.0 + linalg::max_abs(&p)) * 1e-2 {
                break;
            }
        }
        if diverged {
            continue;
        }
        let residual = riccati_map(&p, a, b, q, r, g)
            .map(|m| linalg::max_abs(&(m - &p)))
            .unwrap_or(f64::INFINITY);
        last_residual = residual;
        if residual <= RICCATI_TOL * (1.0 + linalg::max_abs(&p)) {
            let k = riccati_gain(&p, a, b, r, g)
                .ok_or_else(|| Error::InvalidArgument("singular R + gB'PB".into()))?;
            return Ok(RiccatiSolution {
                p,
                k,
                gamma,
                iterations,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "discounted Riccati iteration",
        iterations: RICCATI_MAX_ITERS,
        residual: last_residual,
    })
}

/// Exact LQ cost-to-go of taking `a` in `s` and acting optimally afterwards:
/// `s'Qs + a'Ra + gamma (As + Ba)' P (As + Ba)`. This is `-Q*(s, a)` in
/// reward sign.
pub fn lq_optimal_q(
    sol: &RiccatiSolution,
    a_mat: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DVector<f64>,
    a: &DVector<f64>,
) -> f64 {
    let next = a_mat * s + b_mat * a;
    (s.transpose() * q * s)[0]
        + (a.transpose() * r * a)[0]
        + sol.gamma.gamma() * (next.transpose() * &sol.p * &next)[0]
}
