//! The parametric finite-horizon optimal-control problem used as a
//! Q-function and policy approximator.
//!
//! ```text
//! Q(s, a) = min  sum_{k<H} w_k l(x_k, u_k; phi) + w_H V(x_H; phi)
//!           s.t. x_{k+1} = f(x_k, u_k; phi)
//!                g(x_k, u_k; phi) = 0,  h(x_k, u_k; phi) <= 0,  k < H
//!                x_0 = s, u_0 = a
//! ```
//!
//! `w_k = gamma^k` when discounting inside the horizon is on, `1` otherwise.
//! All callbacks are [`SmoothMap`]s evaluated on the stacked argument
//! `v = [x; u]` (or `v = x` for the terminal cost) and the full parameter
//! vector.

mod cstr;
mod lq;
mod maps;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{rng_from_seed, DiscountConfig, StateVec};

pub use cstr::{
    build_cstr_ocp, CstrConstraints, CstrDynamics, CstrOcpData, CstrScaling, CstrStageCost, CstrTrackingTerminal, FixedMap,
};
pub use lq::{build_lq_ocp, lq_model_matrices, InputBounds, LqOcpData};
pub use maps::{InputBox, LinearCostPerturbation, LinearDynamics, QuadraticStageCost, QuadraticTerminalCost};

/// A twice-differentiable map `R^in x R^p -> R^out` with derivatives in both
/// the argument and the parameters.
///
/// Second derivatives are requested contracted with a weight vector `w`
/// (one entry per output), which is all the Lagrangian needs. Returning
/// `None` from the second-order methods selects a finite-difference
/// fallback on the first-order methods.
pub trait SmoothMap: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64>;
    /// `out x in`
    fn jac(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64>;
    /// `out x p`
    fn jac_phi(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64>;
    /// `sum_i w_i d2 f_i / dv2`, `in x in`
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    /// `sum_i w_i d2 f_i / dv dphi`, `in x p`
    fn hess_phi(
        &self,
        _v: &DVector<f64>,
        _phi: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// Weighted Hessian, by central differences of `J' w` when the map has no
/// analytic one. The flag is `true` when the fallback was used.
pub fn weighted_hessian(
    map: &dyn SmoothMap,
    v: &DVector<f64>,
    phi: &DVector<f64>,
    w: &DVector<f64>,
) -> (DMatrix<f64>, bool) {
    if let Some(h) = map.hess(v, phi, w) {
        return (h, false);
    }
    let n = map.in_dim();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = fd_step(v[j]).max(1e-5);
        let mut vp = v.clone();
        vp[j] += step;
        let mut vm = v.clone();
        vm[j] -= step;
        let col = (map.jac(&vp, phi).transpose() * w - map.jac(&vm, phi).transpose() * w) / (2.0 * step);
        h.set_column(j, &col);
    }
    (linalg::symmetrize(&h), true)
}

/// Weighted mixed derivative, by central differences in `phi` of `J' w`
/// when the map has no analytic one.
pub fn weighted_mixed(
    map: &dyn SmoothMap,
    v: &DVector<f64>,
    phi: &DVector<f64>,
    w: &DVector<f64>,
) -> (DMatrix<f64>, bool) {
    if let Some(h) = map.hess_phi(v, phi, w) {
        return (h, false);
    }
    let p = phi.len();
    let mut h = DMatrix::zeros(map.in_dim(), p);
    for j in 0..p {
        let step = fd_step(phi[j]);
        let mut pp = phi.clone();
        pp[j] += step;
        let mut pm = phi.clone();
        pm[j] -= step;
        let col = (map.jac(v, &pp).transpose() * w - map.jac(v, &pm).transpose() * w) / (2.0 * step);
        h.set_column(j, &col);
    }
    (h, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Model,
    StageCost,
    TerminalCost,
    Constraint,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// Named partition of the parameter vector into contiguous segments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterLayout {
    segments: Vec<Segment>,
}

impl ParameterLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a segment; returns its offset.
    pub fn push(&mut self, name: &str, kind: SegmentKind, len: usize) -> Result<usize> {
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter segment {name}")));
        }
        let offset = self.len();
        self.segments.push(Segment {
            name: name.to_string(),
            kind,
            offset,
            len,
        });
        Ok(offset)
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Boolean mask over the vector selecting the named segments.
    pub fn mask(&self, names: &[&str]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for name in names {
            let seg = self
                .segment(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter segment {name}")))?;
            mask[seg.offset..seg.offset + seg.len].iter_mut().for_each(|m| *m = true);
        }
        Ok(mask)
    }
}

/// Parameter values together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<ParameterLayout>,
    values: DVector<f64>,
}

impl ParameterVector {
    pub fn new(layout: Arc<ParameterLayout>, values: DVector<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::dim("parameter vector", layout.len(), values.len()));
        }
        if !linalg::all_finite(&values) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParameterLayout> {
        &self.layout
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let seg = self
            .layout
            .segment(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter segment {name}")))?;
        Ok(&self.values.as_slice()[seg.offset..seg.offset + seg.len])
    }

    pub fn set_segment(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let seg = self
            .layout
            .segment(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter segment {name}")))?
            .clone();
        if data.len() != seg.len {
            return Err(Error::dim(format!("segment {name}"), seg.len, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("segment {name}")));
        }
        self.values.as_mut_slice()[seg.offset..seg.offset + seg.len].copy_from_slice(data);
        Ok(())
    }

    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }
}

/// The parametric OCP. Immutable; callbacks are shared behind `Arc`.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    horizon: usize,
    n: usize,
    m: usize,
    pub stage_cost: Arc<dyn SmoothMap>,
    pub terminal_cost: Arc<dyn SmoothMap>,
    pub dynamics: Arc<dyn SmoothMap>,
    pub eq_constraints: Option<Arc<dyn SmoothMap>>,
    pub ineq_constraints: Option<Arc<dyn SmoothMap>>,
    gamma: DiscountConfig,
    discount_in_horizon: bool,
    params: ParameterVector,
}

/// Parts for [`OcpSpec::new`].
#[derive(Debug, Clone)]
pub struct OcpParts {
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub stage_cost: Arc<dyn SmoothMap>,
    pub terminal_cost: Arc<dyn SmoothMap>,
    pub dynamics: Arc<dyn SmoothMap>,
    pub eq_constraints: Option<Arc<dyn SmoothMap>>,
    pub ineq_constraints: Option<Arc<dyn SmoothMap>>,
    pub gamma: DiscountConfig,
    pub discount_in_horizon: bool,
    pub params: ParameterVector,
}

impl OcpSpec {
    pub fn new(parts: OcpParts) -> Result<Self> {
        let OcpParts {
            horizon,
            n,
            m,
            stage_cost,
            terminal_cost,
            dynamics,
            eq_constraints,
            ineq_constraints,
            gamma,
            discount_in_horizon,
            params,
        } = parts;
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let check = |map: &dyn SmoothMap, input: usize, output: Option<usize>| -> Result<()> {
            if map.in_dim() != input {
                return Err(Error::dim(format!("{} input", map.name()), input, map.in_dim()));
            }
            if let Some(out) = output {
                if map.out_dim() != out {
                    return Err(Error::dim(format!("{} output", map.name()), out, map.out_dim()));
                }
            }
            let v = DVector::zeros(input);
            let phi = params.values();
            let y = map.eval(&v, phi);
            if y.len() != map.out_dim() {
                return Err(Error::dim(format!("{} evaluated output", map.name()), map.out_dim(), y.len()));
            }
            let j = map.jac(&v, phi);
            if j.nrows() != map.out_dim() || j.ncols() != input {
                return Err(Error::dim(format!("{} jacobian columns", map.name()), input, j.ncols()));
            }
            let jp = map.jac_phi(&v, phi);
            if jp.nrows() != map.out_dim() || jp.ncols() != phi.len() {
                return Err(Error::dim(
                    format!("{} parameter jacobian columns", map.name()),
                    phi.len(),
                    jp.ncols(),
                ));
            }
            Ok(())
        };
        check(stage_cost.as_ref(), n + m, Some(1))?;
        check(terminal_cost.as_ref(), n, Some(1))?;
        check(dynamics.as_ref(), n + m, Some(n))?;
        if let Some(g) = &eq_constraints {
            check(g.as_ref(), n + m, None)?;
        }
        if let Some(h) = &ineq_constraints {
            check(h.as_ref(), n + m, None)?;
        }
        Ok(Self {
            horizon,
            n,
            m,
            stage_cost,
            terminal_cost,
            dynamics,
            eq_constraints,
            ineq_constraints,
            gamma,
            discount_in_horizon,
            params,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn action_dim(&self) -> usize {
        self.m
    }

    pub fn gamma(&self) -> DiscountConfig {
        self.gamma
    }

    pub fn discount_in_horizon(&self) -> bool {
        self.discount_in_horizon
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn n_eq(&self) -> usize {
        self.eq_constraints.as_ref().map_or(0, |g| g.out_dim())
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_constraints.as_ref().map_or(0, |h| h.out_dim())
    }

    /// Objective weight of stage `k` (`k = H` is the terminal weight).
    pub fn stage_weight(&self, k: usize) -> f64 {
        if self.discount_in_horizon {
            self.gamma.gamma().powi(k as i32)
        } else {
            1.0
        }
    }

    /// Same problem with new parameter values (same layout).
    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::InvalidArgument("parameter layout differs from the spec's".into()));
        }
        let mut out = self.clone();
        out.params = params;
        Ok(out)
    }

    pub fn with_param_values(&self, values: DVector<f64>) -> Result<Self> {
        self.with_params(self.params.with_values(values)?)
    }

    /// Same problem with another stage cost.
    pub fn with_stage_cost(&self, stage_cost: Arc<dyn SmoothMap>) -> Result<Self> {
        if stage_cost.in_dim() != self.n + self.m || stage_cost.out_dim() != 1 {
            return Err(Error::dim("replacement stage cost input", self.n + self.m, stage_cost.in_dim()));
        }
        let mut out = self.clone();
        out.stage_cost = stage_cost;
        Ok(out)
    }

    /// Same problem with another terminal cost and parameter vector.
    pub fn with_terminal_cost(
        &self,
        terminal_cost: Arc<dyn SmoothMap>,
        params: ParameterVector,
    ) -> Result<Self> {
        let mut parts = self.to_parts();
        parts.terminal_cost = terminal_cost;
        parts.params = params;
        Self::new(parts)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let mut parts = self.to_parts();
        parts.horizon = horizon;
        Self::new(parts)
    }

    pub fn to_parts(&self) -> OcpParts {
        OcpParts {
            horizon: self.horizon,
            n: self.n,
            m: self.m,
            stage_cost: self.stage_cost.clone(),
            terminal_cost: self.terminal_cost.clone(),
            dynamics: self.dynamics.clone(),
            eq_constraints: self.eq_constraints.clone(),
            ineq_constraints: self.ineq_constraints.clone(),
            gamma: self.gamma,
            discount_in_horizon: self.discount_in_horizon,
            params: self.params.clone(),
        }
    }
}

pub(crate) fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + u.len());
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), u.len()).copy_from(u);
    v
}

/// A predicted trajectory of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPlan {
    /// `x_0 .. x_H`
    pub x_seq: Vec<DVector<f64>>,
    /// `u_0 .. u_{H-1}`
    pub u_seq: Vec<DVector<f64>>,
    pub cost: f64,
    /// `g(x_k, u_k)` per stage (empty vectors without equality constraints).
    pub eq_values: Vec<DVector<f64>>,
    /// `h(x_k, u_k)` per stage.
    pub ineq_values: Vec<DVector<f64>>,
}

impl OpenLoopPlan {
    /// Largest positive `h` value, or 0 when all inequalities hold.
    pub fn max_ineq_violation(&self) -> f64 {
        self.ineq_values
            .iter()
            .flat_map(|h| h.iter())
            .fold(0.0_f64, |acc, &v| acc.max(v))
    }
}

/// Simulate the model forward from `x0` under `u_seq` and accumulate the
/// objective. Constraints are evaluated and reported, not enforced.
pub fn eval_open_loop(spec: &OcpSpec, x0: &StateVec, u_seq: &[DVector<f64>]) -> Result<OpenLoopPlan> {
    let (n, m, h) = (spec.n, spec.m, spec.horizon);
    if x0.len() != n {
        return Err(Error::dim("initial state", n, x0.len()));
    }
    if u_seq.len() != h {
        return Err(Error::dim("input sequence length", h, u_seq.len()));
    }
    let phi = spec.params.values();
    let mut x_seq = Vec::with_capacity(h + 1);
    x_seq.push(x0.as_vector().clone());
    let mut cost = 0.0;
    let mut eq_values = Vec::with_capacity(h);
    let mut ineq_values = Vec::with_capacity(h);
    for (k, u) in u_seq.iter().enumerate() {
        if u.len() != m {
            return Err(Error::dim(format!("input {k}"), m, u.len()));
        }
        let v = stack(&x_seq[k], u);
        cost += spec.stage_weight(k) * spec.stage_cost.eval(&v, phi)[0];
        eq_values.push(spec.eq_constraints.as_ref().map_or_else(|| DVector::zeros(0), |g| g.eval(&v, phi)));
        ineq_values.push(spec.ineq_constraints.as_ref().map_or_else(|| DVector::zeros(0), |g| g.eval(&v, phi)));
        let next = spec.dynamics.eval(&v, phi);
        if !linalg::all_finite(&next) {
            return Err(Error::Divergence { step: k });
        }
        x_seq.push(next);
    }
    cost += spec.stage_weight(h) * spec.terminal_cost.eval(&x_seq[h], phi)[0];
    if !cost.is_finite() {
        return Err(Error::NonFinite("open-loop cost".into()));
    }
    Ok(OpenLoopPlan {
        x_seq,
        u_seq: u_seq.to_vec(),
        cost,
        eq_values,
        ineq_values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingKind {
    /// Output or derivative shape does not match the declared dimensions.
    Shape,
    Jacobian,
    ParamJacobian,
    Hessian,
    MixedHessian,
    /// The callback has no analytic second derivatives; finite differences are used.
    FiniteDifferenceFallback,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub callback: String,
    pub kind: FindingKind,
    pub max_deviation: f64,
    pub message: String,
}

/// Relative deviation threshold for derivative checks.
pub const DERIVATIVE_CHECK_TOL: f64 = 1e-4;

fn relative_deviation(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    linalg::max_abs(&(analytic - reference)) / linalg::max_abs(reference).max(1.0)
}

/// Check one callback at one point against central differences.
pub fn check_map(map: &dyn SmoothMap, v: &DVector<f64>, phi: &DVector<f64>, out: &mut Vec<Finding>) {
    let name = map.name().to_string();
    let y = map.eval(v, phi);
    if y.len() != map.out_dim() {
        out.push(Finding {
            callback: name,
            kind: FindingKind::Shape,
            max_deviation: f64::NAN,
            message: format!("output has {} entries, declared {}", y.len(), map.out_dim()),
        });
        return;
    }
    if !linalg::all_finite(&y) {
        out.push(Finding {
            callback: name,
            kind: FindingKind::NonFinite,
            max_deviation: f64::NAN,
            message: "non-finite output at probe point".into(),
        });
        return;
    }
    let jac = map.jac(v, phi);
    let jac_phi = map.jac_phi(v, phi);
    if jac.shape() != (map.out_dim(), map.in_dim()) || jac_phi.shape() != (map.out_dim(), phi.len()) {
        out.push(Finding {
            callback: name,
            kind: FindingKind::Shape,
            max_deviation: f64::NAN,
            message: format!(
                "jacobian shapes {:?} / {:?}, expected ({}, {}) / ({}, {})",
                jac.shape(),
                jac_phi.shape(),
                map.out_dim(),
                map.in_dim(),
                map.out_dim(),
                phi.len()
            ),
        });
        return;
    }

    let fd_v = central_jacobian(|vv| map.eval(vv, phi), v, map.out_dim());
    let dev = relative_deviation(&jac, &fd_v);
    if dev > DERIVATIVE_CHECK_TOL {
        out.push(Finding {
            callback: name.clone(),
            kind: FindingKind::Jacobian,
            max_deviation: dev,
            message: format!("jacobian deviates from central differences by {dev:.3e}"),
        });
    }
    let fd_p = central_jacobian(|pp| map.eval(v, pp), phi, map.out_dim());
    let dev = relative_deviation(&jac_phi, &fd_p);
    if dev > DERIVATIVE_CHECK_TOL {
        out.push(Finding {
            callback: name.clone(),
            kind: FindingKind::ParamJacobian,
            max_deviation: dev,
            message: format!("parameter jacobian deviates from central differences by {dev:.3e}"),
        });
    }

    let w = DVector::from_fn(map.out_dim(), |i, _| 1.0 + 0.5 * i as f64);
    match map.hess(v, phi, &w) {
        Some(h) => {
            let fd = central_jacobian(|vv| map.jac(vv, phi).transpose() * &w, v, map.in_dim());
            let dev = relative_deviation(&h, &fd);
            if dev > DERIVATIVE_CHECK_TOL {
                out.push(Finding {
                    callback: name.clone(),
                    kind: FindingKind::Hessian,
                    max_deviation: dev,
                    message: format!("weighted hessian deviates from differences of J'w by {dev:.3e}"),
                });
            }
        }
        None => out.push(Finding {
            callback: name.clone(),
            kind: FindingKind::FiniteDifferenceFallback,
            max_deviation: 0.0,
            message: "no analytic hessian; finite differences of the jacobian are used".into(),
        }),
    }
    if let Some(h) = map.hess_phi(v, phi, &w) {
        let fd = central_jacobian(|pp| map.jac(v, pp).transpose() * &w, phi, map.in_dim());
        let dev = relative_deviation(&h, &fd);
        if dev > DERIVATIVE_CHECK_TOL {
            out.push(Finding {
                callback: name,
                kind: FindingKind::MixedHessian,
                max_deviation: dev,
                message: format!("mixed hessian deviates from differences of J'w by {dev:.3e}"),
            });
        }
    }
}

/// Central-difference jacobian with step `1e-6 (1 + |x_j|)`.
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(out_dim, x.len());
    for j in 0..x.len() {
        let step = fd_step(x[j]);
        let mut xp = x.clone();
        xp[j] += step;
        let mut xm = x.clone();
        xm[j] -= step;
        jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * step)));
    }
    jac
}

/// Probe every callback at a few seeded points in `[-radius, radius]`
/// around the origin and report shape and derivative problems.
pub fn validate_spec(spec: &OcpSpec) -> Vec<Finding> {
    validate_spec_around(spec, &DVector::zeros(spec.n), &DVector::zeros(spec.m), 1.0, 3)
}

/// As [`validate_spec`] with probes centered at `(x_center, u_center)`.
pub fn validate_spec_around(
    spec: &OcpSpec,
    x_center: &DVector<f64>,
    u_center: &DVector<f64>,
    radius: f64,
    probes: usize,
) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut rng = rng_from_seed(0x5eed);
    let phi = spec.params.values();
    let center = stack(x_center, u_center);
    for _ in 0..probes {
        let v = DVector::from_fn(spec.n + spec.m, |i, _| center[i] + radius * rng.random_range(-1.0..1.0));
        let x = v.rows(0, spec.n).into_owned();
        check_map(spec.stage_cost.as_ref(), &v, phi, &mut findings);
        check_map(spec.terminal_cost.as_ref(), &x, phi, &mut findings);
        check_map(spec.dynamics.as_ref(), &v, phi, &mut findings);
        if let Some(g) = &spec.eq_constraints {
            check_map(g.as_ref(), &v, phi, &mut findings);
        }
        if let Some(h) = &spec.ineq_constraints {
            check_map(h.as_ref(), &v, phi, &mut findings);
        }
    }
    // One report per (callback, kind): keep the worst deviation.
    let mut merged: Vec<Finding> = Vec::new();
    for f in findings {
        match merged.iter_mut().find(|g| g.callback == f.callback && g.kind == f.kind) {
            Some(g) => {
                if f.max_deviation > g.max_deviation {
                    *g = f;
                }
            }
            None => merged.push(f),
        }
    }
    merged
}

#[cfg(test)]
mod tests;
