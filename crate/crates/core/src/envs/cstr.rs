//! Four-state exothermic CSTR (`A -> B -> C`, `2A -> D`) with inflow `F`
//! and coolant heat flow `Q` as inputs.
//!
//! The environment state is augmented with the previous input,
//! `s = [c_A, c_B, T_R, T_K, F_prev, Q_prev]`, so the move penalty in the
//! reward is a function of `(s, a)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionVec, Environment, SimRng, StateVec};

/// Physical states.
pub const N_PHYS: usize = 4;
/// Inputs `[F, Q]`.
pub const N_INPUT: usize = 2;
/// Environment state: physical states plus the previous input.
pub const N_STATE: usize = N_PHYS + N_INPUT;

const KELVIN: f64 = 273.15;

/// Reaction and thermal constants. Values come from the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrParams {
    pub k0_ab: f64,
    pub k0_bc: f64,
    pub k0_ad: f64,
    pub e_a_ab: f64,
    pub e_a_bc: f64,
    pub e_a_ad: f64,
    pub h_r_ab: f64,
    pub h_r_bc: f64,
    pub h_r_ad: f64,
    pub rho: f64,
    pub cp: f64,
    pub cp_k: f64,
    pub a_r: f64,
    pub v_r: f64,
    pub m_k: f64,
    pub t_in: f64,
    pub k_w: f64,
    pub c_a0: f64,
}

/// Closed box `lower <= x <= upper` on the leading components of a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn validate(&self, what: &str, dim: usize) -> Result<()> {
        if self.lower.len() != dim {
            return Err(Error::dim(format!("{what} lower"), dim, self.lower.len()));
        }
        if self.upper.len() != dim {
            return Err(Error::dim(format!("{what} upper"), dim, self.upper.len()));
        }
        if self.lower.iter().chain(&self.upper).any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument(format!("{what} has NaN bounds")));
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument(format!("{what} is empty")));
        }
        Ok(())
    }

    /// True if every bounded component lies in the box widened by `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .all(|((lo, hi), v)| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((lo, hi), v) in self.lower.iter().zip(&self.upper).zip(x.iter_mut()) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// `r = -tracking (c_B - setpoint)^2 - sum_j moves_j (a_j - a_prev_j)^2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub tracking: f64,
    /// One weight per input.
    pub moves: Vec<f64>,
}

fn default_clip() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrConfig {
    pub params: CstrParams,
    /// Control interval in hours.
    pub dt: f64,
    /// RK4 steps per control interval.
    pub substeps: usize,
    /// Operating constraints on `(c_A, c_B, T_R, T_K)`.
    pub state_box: BoxBounds,
    /// Actuator limits on `(F, Q)`; actions are saturated to this box.
    pub input_box: BoxBounds,
    pub setpoint: f64,
    pub reward: RewardWeights,
    /// Clip negative concentrations to zero after each step.
    #[serde(default = "default_clip")]
    pub clip_negative: bool,
    /// Reset box for the full six-component state; equal bounds give a
    /// fixed start.
    pub x0_low: Vec<f64>,
    pub x0_high: Vec<f64>,
}

impl CstrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        self.state_box.validate("state_box", N_PHYS)?;
        self.input_box.validate("input_box", N_INPUT)?;
        if self.reward.moves.len() != N_INPUT {
            return Err(Error::dim("reward.moves", N_INPUT, self.reward.moves.len()));
        }
        if self.reward.tracking < 0.0 || self.reward.moves.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidArgument("reward weights must be nonnegative".into()));
        }
        let reset = BoxBounds {
            lower: self.x0_low.clone(),
            upper: self.x0_high.clone(),
        };
        reset.validate("x0 box", N_STATE)?;
        Ok(())
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let e = s[1] - self.setpoint;
        let moves: f64 = (0..N_INPUT)
            .map(|j| self.reward.moves[j] * (a[j] - s[N_PHYS + j]).powi(2))
            .sum();
        -self.reward.tracking * e * e - moves
    }
}

struct Rates {
    k: [f64; 3],
    dk: [f64; 3],
}

fn rates(p: &CstrParams, t_r: f64) -> Rates {
    let tk = t_r + KELVIN;
    let k = [
        p.k0_ab * (-p.e_a_ab / tk).exp(),
        p.k0_bc * (-p.e_a_bc / tk).exp(),
        p.k0_ad * (-p.e_a_ad / tk).exp(),
    ];
    let dk = [
        k[0] * p.e_a_ab / (tk * tk),
        k[1] * p.e_a_bc / (tk * tk),
        k[2] * p.e_a_ad / (tk * tk),
    ];
    Rates { k, dk }
}

fn rhs_arr(p: &CstrParams, x: &[f64; N_PHYS], u: &[f64; N_INPUT]) -> [f64; N_PHYS] {
    let [ca, cb, tr, tk] = *x;
    let [f, q] = *u;
    let Rates { k, .. } = rates(p, tr);
    let rcp = p.rho * p.cp;
    [
        f * (p.c_a0 - ca) - k[0] * ca - k[2] * ca * ca,
        -f * cb + k[0] * ca - k[1] * cb,
        (k[0] * ca * p.h_r_ab + k[1] * cb * p.h_r_bc + k[2] * ca * ca * p.h_r_ad) / (-rcp)
            + f * (p.t_in - tr)
            + p.k_w * p.a_r * (tk - tr) / (rcp * p.v_r),
        (q + p.k_w * p.a_r * (tr - tk)) / (p.m_k * p.cp_k),
    ]
}

/// `d rhs / d[x, u]`, `4 x 6`.
fn rhs_jac_arr(p: &CstrParams, x: &[f64; N_PHYS], u: &[f64; N_INPUT]) -> [[f64; N_STATE]; N_PHYS] {
    let [ca, cb, tr, _] = *x;
    let f = u[0];
    let Rates { k, dk } = rates(p, tr);
    let rcp = p.rho * p.cp;
    let wall = p.k_w * p.a_r / (rcp * p.v_r);
    let jacket = p.k_w * p.a_r / (p.m_k * p.cp_k);
    [
        [
            -f - k[0] - 2.0 * k[2] * ca,
            0.0,
            -dk[0] * ca - dk[2] * ca * ca,
            0.0,
            p.c_a0 - ca,
            0.0,
        ],
        [k[0], -f - k[1], dk[0] * ca - dk[1] * cb, 0.0, -cb, 0.0],
        [
            (k[0] * p.h_r_ab + 2.0 * k[2] * ca * p.h_r_ad) / (-rcp),
            k[1] * p.h_r_bc / (-rcp),
            (dk[0] * ca * p.h_r_ab + dk[1] * cb * p.h_r_bc + dk[2] * ca * ca * p.h_r_ad) / (-rcp) - f - wall,
            wall,
            p.t_in - tr,
            0.0,
        ],
        [0.0, 0.0, jacket, -jacket, 0.0, 1.0 / (p.m_k * p.cp_k)],
    ]
}

fn phys(x: &[f64]) -> [f64; N_PHYS] {
    [x[0], x[1], x[2], x[3]]
}

fn input(u: &[f64]) -> [f64; N_INPUT] {
    [u[0], u[1]]
}

/// Time derivative of the physical state.
pub fn cstr_rhs(p: &CstrParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_row_slice(&rhs_arr(p, &phys(x.as_slice()), &input(u.as_slice())))
}

/// Jacobian of [`cstr_rhs`] with respect to `[x; u]`, `4 x 6`.
pub fn cstr_rhs_jacobian(p: &CstrParams, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let j = rhs_jac_arr(p, &phys(x.as_slice()), &input(u.as_slice()));
    DMatrix::from_fn(N_PHYS, N_STATE, |r, c| j[r][c])
}

fn axpy(x: &[f64; N_PHYS], h: f64, k: &[f64; N_PHYS]) -> [f64; N_PHYS] {
    [x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2], x[3] + h * k[3]]
}

/// Fixed-step RK4 over `dt` with `substeps` steps, input held constant.
pub fn cstr_integrate(p: &CstrParams, x: &[f64], u: &[f64], dt: f64, substeps: usize) -> [f64; N_PHYS] {
    let u = input(u);
    let h = dt / substeps as f64;
    let mut x = phys(x);
    for _ in 0..substeps {
        let k1 = rhs_arr(p, &x, &u);
        let k2 = rhs_arr(p, &axpy(&x, 0.5 * h, &k1), &u);
        let k3 = rhs_arr(p, &axpy(&x, 0.5 * h, &k2), &u);
        let k4 = rhs_arr(p, &axpy(&x, h, &k3), &u);
        for i in 0..N_PHYS {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

type Sens = [[f64; N_STATE]; N_PHYS];

/// `A * [S; 0 I]`: chains a rhs Jacobian through the sensitivity of the
/// stage point with respect to the step's initial `[x; u]`.
fn chain(j: &Sens, s: &Sens) -> Sens {
    let mut out = [[0.0; N_STATE]; N_PHYS];
    for r in 0..N_PHYS {
        for c in 0..N_STATE {
            let mut acc: f64 = (0..N_PHYS).map(|k| j[r][k] * s[k][c]).sum();
            if c >= N_PHYS {
                acc += j[r][c];
            }
            out[r][c] = acc;
        }
    }
    out
}

fn sens_axpy(s: &Sens, h: f64, k: &Sens) -> Sens {
    let mut out = *s;
    for r in 0..N_PHYS {
        for c in 0..N_STATE {
            out[r][c] += h * k[r][c];
        }
    }
    out
}

/// [`cstr_integrate`] together with the exact Jacobian of the discrete
/// map with respect to `[x; u]` (`4 x 6`).
pub fn cstr_integrate_with_jacobian(
    p: &CstrParams,
    x: &[f64],
    u: &[f64],
    dt: f64,
    substeps: usize,
) -> ([f64; N_PHYS], DMatrix<f64>) {
    let u = input(u);
    let h = dt / substeps as f64;
    let mut x = phys(x);
    // d x / d [x0; u0]
    let mut s: Sens = [[0.0; N_STATE]; N_PHYS];
    for (i, row) in s.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..substeps {
        let k1 = rhs_arr(p, &x, &u);
        let d1 = chain(&rhs_jac_arr(p, &x, &u), &s);
        let x2 = axpy(&x, 0.5 * h, &k1);
        let k2 = rhs_arr(p, &x2, &u);
        let d2 = chain(&rhs_jac_arr(p, &x2, &u), &sens_axpy(&s, 0.5 * h, &d1));
        let x3 = axpy(&x, 0.5 * h, &k2);
        let k3 = rhs_arr(p, &x3, &u);
        let d3 = chain(&rhs_jac_arr(p, &x3, &u), &sens_axpy(&s, 0.5 * h, &d2));
        let x4 = axpy(&x, h, &k3);
        let k4 = rhs_arr(p, &x4, &u);
        let d4 = chain(&rhs_jac_arr(p, &x4, &u), &sens_axpy(&s, h, &d3));
        for i in 0..N_PHYS {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            for c in 0..N_STATE {
                s[i][c] += h / 6.0 * (d1[i][c] + 2.0 * d2[i][c] + 2.0 * d3[i][c] + d4[i][c]);
            }
        }
    }
    (x, DMatrix::from_fn(N_PHYS, N_STATE, |r, c| s[r][c]))
}

/// One control interval. `s` is the six-component state; the action is
/// saturated to the input box before use.
pub fn cstr_step(cfg: &CstrConfig, s: &StateVec, a: &ActionVec) -> Result<(f64, StateVec)> {
    if s.len() != N_STATE {
        return Err(Error::dim("cstr state", N_STATE, s.len()));
    }
    if a.len() != N_INPUT {
        return Err(Error::dim("cstr action", N_INPUT, a.len()));
    }
    let mut u = [a[0], a[1]];
    cfg.input_box.clamp(&mut u);
    let r = cfg.reward(s.as_slice(), &u);
    let x = cstr_integrate(&cfg.params, s.as_slice(), &u, cfg.dt, cfg.substeps);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut next = [x[0], x[1], x[2], x[3], u[0], u[1]];
    if cfg.clip_negative {
        for (i, c) in next.iter_mut().take(2).enumerate() {
            if *c < 0.0 {
                log::debug!("clipped concentration {i} from {c:e} to zero");
                *c = 0.0;
            }
        }
    }
    Ok((r, StateVec::from_slice(&next)?))
}

/// Number of states outside `state_box` by more than `1e-9` in any bounded
/// component. The box is closed.
pub fn constraint_violation_count<'a, I>(traj: I, state_box: &BoxBounds) -> usize
where
    I: IntoIterator<Item = &'a StateVec>,
{
    traj.into_iter()
        .filter(|s| !state_box.contains(s.as_slice(), 1e-9))
        .count()
}

#[derive(Debug, Clone)]
pub struct CstrEnv {
    cfg: CstrConfig,
}

impl CstrEnv {
    pub fn new(cfg: CstrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &CstrConfig {
        &self.cfg
    }
}

impl Environment for CstrEnv {
    fn state_dim(&self) -> usize {
        N_STATE
    }

    fn action_dim(&self) -> usize {
        N_INPUT
    }

    fn reset(&self, rng: &mut SimRng) -> StateVec {
        let x = DVector::from_fn(N_STATE, |i, _| {
            let (lo, hi) = (self.cfg.x0_low[i], self.cfg.x0_high[i]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        });
        StateVec::new(x).expect("finite box")
    }

    fn step(&self, s: &StateVec, a: &ActionVec, _rng: &mut SimRng) -> Result<(f64, StateVec)> {
        cstr_step(&self.cfg, s, a)
    }
}

#[cfg(test)]
pub(crate) mod tests;
