//! MPC model of the CSTR in scaled coordinates.
//!
//! The OCP state is `xi = (s - center) / scale` for the six-component
//! environment state and the input is `nu = (a - center[4..]) / scale[4..]`,
//! so the remembered input and the new input share units. The dynamics are
//! the environment's RK4 map, which makes the model exact.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{OcpParts, OcpSpec, ParameterLayout, ParameterVector, SegmentKind, SmoothMap};
use crate::envs::{cstr_integrate, cstr_integrate_with_jacobian, CstrConfig};
use crate::error::{Error, Result};
use crate::mdp::{ActionVec, DiscountConfig, StateVec};

const N: usize = 6;
const M: usize = 2;
const NP: usize = 4;

/// Affine change of variables between environment and OCP coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl CstrScaling {
    pub fn validate(&self) -> Result<()> {
        if self.center.len() != N {
            return Err(Error::dim("scaling center", N, self.center.len()));
        }
        if self.scale.len() != N {
            return Err(Error::dim("scaling scale", N, self.scale.len()));
        }
        if self.scale.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument("scaling factors must be positive".into()));
        }
        Ok(())
    }

    pub fn to_scaled_state(&self, s: &[f64]) -> DVector<f64> {
        DVector::from_fn(N, |i, _| (s[i] - self.center[i]) / self.scale[i])
    }

    pub fn from_scaled_state(&self, xi: &[f64]) -> DVector<f64> {
        DVector::from_fn(N, |i, _| self.center[i] + self.scale[i] * xi[i])
    }

    pub fn to_scaled_input(&self, a: &[f64]) -> DVector<f64> {
        DVector::from_fn(M, |j, _| (a[j] - self.center[NP + j]) / self.scale[NP + j])
    }

    pub fn from_scaled_input(&self, nu: &[f64]) -> DVector<f64> {
        DVector::from_fn(M, |j, _| self.center[NP + j] + self.scale[NP + j] * nu[j])
    }

    pub fn state(&self, s: &StateVec) -> Result<StateVec> {
        StateVec::new(self.to_scaled_state(s.as_slice()))
    }

    pub fn action(&self, nu: &ActionVec) -> Result<ActionVec> {
        ActionVec::new(self.from_scaled_input(nu.as_slice()))
    }
}

/// Scaled RK4 step: `xi' = [scaled x(dt); nu]`.
#[derive(Debug, Clone)]
pub struct CstrDynamics {
    pub env: CstrConfig,
    pub scaling: CstrScaling,
    pub n_params: usize,
}

impl CstrDynamics {
    fn physical(&self, v: &DVector<f64>) -> ([f64; NP], [f64; M]) {
        let s = self.scaling.from_scaled_state(&v.as_slice()[..N]);
        let a = self.scaling.from_scaled_input(&v.as_slice()[N..]);
        ([s[0], s[1], s[2], s[3]], [a[0], a[1]])
    }

    /// Scaled successor and its `4 x 8` Jacobian for the physical rows.
    fn successor_with_jac(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (x, u) = self.physical(v);
        let (next, j) = cstr_integrate_with_jacobian(&self.env.params, &x, &u, self.env.dt, self.env.substeps);
        let d = &self.scaling.scale;
        let y = DVector::from_fn(NP, |i, _| (next[i] - self.scaling.center[i]) / d[i]);
        let mut jac = DMatrix::zeros(NP, N + M);
        for i in 0..NP {
            for c in 0..NP {
                jac[(i, c)] = j[(i, c)] * d[c] / d[i];
            }
            for k in 0..M {
                jac[(i, N + k)] = j[(i, NP + k)] * d[NP + k] / d[i];
            }
        }
        (y, jac)
    }
}

impl SmoothMap for CstrDynamics {
    fn name(&self) -> &str {
        "cstr_dynamics"
    }
    fn in_dim(&self) -> usize {
        N + M
    }
    fn out_dim(&self) -> usize {
        N
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        let (x, u) = self.physical(v);
        let next = cstr_integrate(&self.env.params, &x, &u, self.env.dt, self.env.substeps);
        DVector::from_fn(N, |i, _| {
            if i < NP {
                (next[i] - self.scaling.center[i]) / self.scaling.scale[i]
            } else {
                v[N + i - NP]
            }
        })
    }
    fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let (_, top) = self.successor_with_jac(v);
        let mut j = DMatrix::zeros(N, N + M);
        j.rows_mut(0, NP).copy_from(&top);
        for k in 0..M {
            j[(NP + k, N + k)] = 1.0;
        }
        j
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(N, self.n_params)
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(N + M, self.n_params))
    }
}

/// `-r(s, a)` in scaled coordinates, times `factor`. The setpoint is the
/// parameter at `setpoint_offset`.
#[derive(Debug, Clone)]
pub struct CstrStageCost {
    pub tracking: f64,
    pub moves: [f64; M],
    pub scaling: CstrScaling,
    pub factor: f64,
    pub setpoint_offset: usize,
    pub n_params: usize,
}

impl CstrStageCost {
    fn error(&self, v: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        self.scaling.center[1] + self.scaling.scale[1] * v[1] - phi[self.setpoint_offset]
    }

    /// Physical move `a_j - a_prev_j` is `d_j (nu_j - xi_{4+j})`.
    fn move_weight(&self, j: usize) -> f64 {
        self.moves[j] * self.scaling.scale[NP + j].powi(2)
    }
}

impl SmoothMap for CstrStageCost {
    fn name(&self) -> &str {
        "cstr_stage_cost"
    }
    fn in_dim(&self) -> usize {
        N + M
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        let e = self.error(v, phi);
        let moves: f64 = (0..M).map(|j| self.move_weight(j) * (v[N + j] - v[NP + j]).powi(2)).sum();
        DVector::from_element(1, self.factor * (self.tracking * e * e + moves))
    }
    fn jac(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(1, N + M);
        j[(0, 1)] = self.factor * 2.0 * self.tracking * self.error(v, phi) * self.scaling.scale[1];
        for k in 0..M {
            let g = self.factor * 2.0 * self.move_weight(k) * (v[N + k] - v[NP + k]);
            j[(0, N + k)] = g;
            j[(0, NP + k)] = -g;
        }
        j
    }
    fn jac_phi(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(1, self.n_params);
        j[(0, self.setpoint_offset)] = -self.factor * 2.0 * self.tracking * self.error(v, phi);
        j
    }
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(N + M, N + M);
        h[(1, 1)] = 2.0 * self.tracking * self.scaling.scale[1].powi(2);
        for k in 0..M {
            let c = 2.0 * self.move_weight(k);
            h[(N + k, N + k)] = c;
            h[(NP + k, NP + k)] = c;
            h[(N + k, NP + k)] = -c;
            h[(NP + k, N + k)] = -c;
        }
        Some(h * (self.factor * w[0]))
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(N + M, self.n_params);
        h[(1, self.setpoint_offset)] = -self.factor * w[0] * 2.0 * self.tracking * self.scaling.scale[1];
        Some(h)
    }
}

/// Input bounds on `nu` and, optionally, the operating box on the
/// successor state, tightened by `backoff` in scaled units.
#[derive(Debug, Clone)]
pub struct CstrConstraints {
    pub dynamics: CstrDynamics,
    pub state_lower: [f64; NP],
    pub state_upper: [f64; NP],
    pub input_lower: [f64; M],
    pub input_upper: [f64; M],
    pub state_constraints: bool,
}

impl CstrConstraints {
    fn n_state_rows(&self) -> usize {
        if self.state_constraints {
            2 * NP
        } else {
            0
        }
    }
}

impl SmoothMap for CstrConstraints {
    fn name(&self) -> &str {
        "cstr_constraints"
    }
    fn in_dim(&self) -> usize {
        N + M
    }
    fn out_dim(&self) -> usize {
        2 * M + self.n_state_rows()
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.out_dim());
        for k in 0..M {
            out[k] = v[N + k] - self.input_upper[k];
            out[M + k] = self.input_lower[k] - v[N + k];
        }
        if self.state_constraints {
            let next = self.dynamics.eval(v, &DVector::zeros(0));
            for i in 0..NP {
                out[2 * M + i] = next[i] - self.state_upper[i];
                out[2 * M + NP + i] = self.state_lower[i] - next[i];
            }
        }
        out
    }
    fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.out_dim(), N + M);
        for k in 0..M {
            j[(k, N + k)] = 1.0;
            j[(M + k, N + k)] = -1.0;
        }
        if self.state_constraints {
            let (_, top) = self.dynamics.successor_with_jac(v);
            for i in 0..NP {
                for c in 0..N + M {
                    j[(2 * M + i, c)] = top[(i, c)];
                    j[(2 * M + NP + i, c)] = -top[(i, c)];
                }
            }
        }
        j
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.out_dim(), self.dynamics.n_params)
    }
    fn hess(&self, v: &DVector<f64>, phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        if self.state_constraints {
            None
        } else {
            let _ = (v, phi, w);
            Some(DMatrix::zeros(N + M, N + M))
        }
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(N + M, self.dynamics.n_params))
    }
}

/// Wraps a parameter-free map as `factor * inner(v)` with zero parameter
/// derivatives of width `n_params`.
#[derive(Debug, Clone)]
pub struct FixedMap {
    pub inner: Arc<dyn SmoothMap>,
    pub factor: f64,
    pub n_params: usize,
}

impl SmoothMap for FixedMap {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        self.inner.eval(v, &DVector::zeros(0)) * self.factor
    }
    fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac(v, &DVector::zeros(0)) * self.factor
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.out_dim(), self.n_params)
    }
    fn hess(&self, v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.hess(v, &DVector::zeros(0), w).map(|h| h * self.factor)
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.in_dim(), self.n_params))
    }
}

/// `weight (c_B - setpoint)^2` on the scaled terminal state; parameter-free.
#[derive(Debug, Clone)]
pub struct CstrTrackingTerminal {
    pub weight: f64,
    pub setpoint: f64,
    pub scaling: CstrScaling,
}

impl SmoothMap for CstrTrackingTerminal {
    fn name(&self) -> &str {
        "cstr_tracking_terminal"
    }
    fn in_dim(&self) -> usize {
        N
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        let e = self.scaling.center[1] + self.scaling.scale[1] * v[1] - self.setpoint;
        DVector::from_element(1, self.weight * e * e)
    }
    fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let e = self.scaling.center[1] + self.scaling.scale[1] * v[1] - self.setpoint;
        let mut j = DMatrix::zeros(1, N);
        j[(0, 1)] = 2.0 * self.weight * e * self.scaling.scale[1];
        j
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 0)
    }
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(N, N);
        h[(1, 1)] = 2.0 * self.weight * self.scaling.scale[1].powi(2) * w[0];
        Some(h)
    }
}

/// Ingredients of a CSTR MPC. `terminal` is a parameter-free map on the
/// scaled state in reward-to-cost units (before `cost_scale`).
#[derive(Debug, Clone)]
pub struct CstrOcpData {
    pub env: CstrConfig,
    pub scaling: CstrScaling,
    pub horizon: usize,
    pub gamma: DiscountConfig,
    /// Multiplies every cost term; leaves the minimizer unchanged.
    pub cost_scale: f64,
    /// Tightening of the operating box, in scaled units.
    pub backoff: f64,
    pub state_constraints: bool,
    pub terminal: Arc<dyn SmoothMap>,
}

/// Parameter segment `setpoint` (stage cost), initialized from the
/// environment config.
pub fn build_cstr_ocp(data: &CstrOcpData) -> Result<OcpSpec> {
    data.env.validate()?;
    data.scaling.validate()?;
    if !(data.cost_scale > 0.0) {
        return Err(Error::InvalidArgument("cost_scale must be positive".into()));
    }
    if !(data.backoff >= 0.0) {
        return Err(Error::InvalidArgument("backoff must be nonnegative".into()));
    }
    if data.terminal.in_dim() != N || data.terminal.out_dim() != 1 {
        return Err(Error::dim("terminal cost input", N, data.terminal.in_dim()));
    }
    let mut layout = ParameterLayout::new();
    let sp_off = layout.push("setpoint", SegmentKind::StageCost, 1)?;
    let n_params = layout.len();
    let mut params = ParameterVector::new(Arc::new(layout), DVector::zeros(n_params))?;
    params.set_segment("setpoint", &[data.env.setpoint])?;

    let sc = &data.scaling;
    let dynamics = CstrDynamics {
        env: data.env.clone(),
        scaling: sc.clone(),
        n_params,
    };
    let sb = &data.env.state_box;
    let ib = &data.env.input_box;
    let state_lower = std::array::from_fn(|i| (sb.lower[i] - sc.center[i]) / sc.scale[i] + data.backoff);
    let state_upper = std::array::from_fn(|i| (sb.upper[i] - sc.center[i]) / sc.scale[i] - data.backoff);
    let input_lower = std::array::from_fn(|k| (ib.lower[k] - sc.center[NP + k]) / sc.scale[NP + k]);
    let input_upper = std::array::from_fn(|k| (ib.upper[k] - sc.center[NP + k]) / sc.scale[NP + k]);
    let constraints = CstrConstraints {
        dynamics: dynamics.clone(),
        state_lower,
        state_upper,
        input_lower,
        input_upper,
        state_constraints: data.state_constraints,
    };
    let stage = CstrStageCost {
        tracking: data.env.reward.tracking,
        moves: [data.env.reward.moves[0], data.env.reward.moves[1]],
        scaling: sc.clone(),
        factor: data.cost_scale,
        setpoint_offset: sp_off,
        n_params,
    };
    OcpSpec::new(OcpParts {
        horizon: data.horizon,
        n: N,
        m: M,
        stage_cost: Arc::new(stage),
        terminal_cost: Arc::new(FixedMap {
            inner: data.terminal.clone(),
            factor: data.cost_scale,
            n_params,
        }),
        dynamics: Arc::new(dynamics),
        eq_constraints: None,
        ineq_constraints: Some(Arc::new(constraints)),
        gamma: data.gamma,
        discount_in_horizon: true,
        params,
    })
}

#[cfg(test)]
mod tests;
