//! Multiple-shooting SQP for the parametric OCP.
//!
//! [`solve_ocp`] returns a [`KktPoint`] with multipliers for the Lagrangian
//! `L = F(z) + lambda' c_eq(z) + mu' c_in(z)`, `mu >= 0`. The same point
//! feeds warm starts and the sensitivity module.

pub(crate) mod nlp;
mod qp;
mod sqp;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::mdp::{ActionVec, StateVec};

pub use qp::{qp_solve, solve_qp, QpFailure, QpProblem, QpSettings, QpSolution};
pub use sqp::{mpc_policy, mpc_qvalue, solve_ocp, SqpSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub max_pivots: usize,
    /// Return `MaxIter` iterates from [`mpc_policy`] instead of failing.
    pub accept_max_iter: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 50,
            max_pivots: 200,
            accept_max_iter: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Primal-dual point of one OCP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    /// `[x_1 .. x_H, u_0 .. u_{H-1}]`
    pub z: DVector<f64>,
    /// Dynamics rows, then `g` rows, then pin rows (pinned solves only).
    pub lambda: DVector<f64>,
    /// One entry per `h` row, stage-major; nonnegative.
    pub mu: DVector<f64>,
    /// Inequality rows with `h >= -ACTIVE_TOL`, ascending.
    pub active_set: Vec<usize>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Initial state of the solve.
    pub s: DVector<f64>,
    /// Pinned first input, if any.
    pub pinned: Option<DVector<f64>>,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Tolerance for counting an inequality as active.
pub const ACTIVE_TOL: f64 = 1e-7;

impl KktPoint {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn x(&self, k: usize) -> DVector<f64> {
        if k == 0 {
            self.s.clone()
        } else {
            self.z.rows((k - 1) * self.state_dim, self.state_dim).into_owned()
        }
    }

    pub fn u(&self, k: usize) -> DVector<f64> {
        self.z
            .rows(self.horizon * self.state_dim + k * self.action_dim, self.action_dim)
            .into_owned()
    }

    /// First planned input.
    pub fn first_action(&self) -> ActionVec {
        ActionVec::new(self.u(0)).expect("converged plans are finite")
    }

    /// Warm start for the next receding-horizon step: the plan shifted by
    /// one stage, last stage repeated. Multipliers are shifted alike.
    pub fn shifted(&self, next_state: &StateVec) -> KktPoint {
        let (h, n, m) = (self.horizon, self.state_dim, self.action_dim);
        let mut z = self.z.clone();
        for k in 1..h {
            let src = self.x(k + 1);
            z.rows_mut((k - 1) * n, n).copy_from(&src);
        }
        for k in 0..h.saturating_sub(1) {
            let src = self.u(k + 1);
            z.rows_mut(h * n + k * m, m).copy_from(&src);
        }
        let shift = |v: &DVector<f64>, block: usize| -> DVector<f64> {
            let mut out = v.clone();
            if block == 0 || v.len() < h * block {
                return out;
            }
            for k in 0..h - 1 {
                let src = v.rows((k + 1) * block, block).into_owned();
                out.rows_mut(k * block, block).copy_from(&src);
            }
            out
        };
        let n_in_block = if h > 0 { self.mu.len() / h } else { 0 };
        KktPoint {
            z,
            lambda: shift(&self.lambda, n),
            mu: shift(&self.mu, n_in_block),
            s: next_state.as_vector().clone(),
            pinned: None,
            ..self.clone()
        }
    }
}
