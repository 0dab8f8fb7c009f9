use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::maps::{InputBox, LinearDynamics, QuadraticStageCost, QuadraticTerminalCost};
use super::{OcpParts, OcpSpec, ParameterLayout, ParameterVector, SegmentKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::DiscountConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct InputBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Ingredients of a linear-quadratic MPC.
///
/// Parameter segments, in order: `A`, `B` (model), `Q`, `R` (stage cost),
/// `P`, `c` (terminal cost `x'Px + c`), then `u_lo`, `u_hi` (constraints)
/// when bounds are present.
#[derive(Debug, Clone)]
pub struct LqOcpData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_terminal: DMatrix<f64>,
    pub terminal_offset: f64,
    pub horizon: usize,
    pub bounds: Option<InputBounds>,
    pub gamma: DiscountConfig,
    pub discount_in_horizon: bool,
}

pub fn build_lq_ocp(data: &LqOcpData) -> Result<OcpSpec> {
    let n = data.a.nrows();
    if !data.a.is_square() {
        return Err(Error::dim("A columns", n, data.a.ncols()));
    }
    if data.b.nrows() != n {
        return Err(Error::dim("B rows", n, data.b.nrows()));
    }
    let m = data.b.ncols();
    if data.q.shape() != (n, n) {
        return Err(Error::dim("Q rows", n, data.q.nrows()));
    }
    if data.r.shape() != (m, m) {
        return Err(Error::dim("R rows", m, data.r.nrows()));
    }
    if data.p_terminal.shape() != (n, n) {
        return Err(Error::dim("terminal P rows", n, data.p_terminal.nrows()));
    }
    if !linalg::is_symmetric(&data.r, 1e-12) || linalg::min_eigenvalue(&data.r) <= 0.0 {
        return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
    }

    let mut layout = ParameterLayout::new();
    let a_off = layout.push("A", SegmentKind::Model, n * n)?;
    let b_off = layout.push("B", SegmentKind::Model, n * m)?;
    let q_off = layout.push("Q", SegmentKind::StageCost, n * n)?;
    let r_off = layout.push("R", SegmentKind::StageCost, m * m)?;
    let p_off = layout.push("P", SegmentKind::TerminalCost, n * n)?;
    let c_off = layout.push("c", SegmentKind::TerminalCost, 1)?;
    let bound_offsets = match &data.bounds {
        Some(bounds) => {
            if bounds.lower.len() != m || bounds.upper.len() != m {
                return Err(Error::dim("input bounds", m, bounds.lower.len().min(bounds.upper.len())));
            }
            if bounds.lower.iter().zip(bounds.upper.iter()).any(|(lo, hi)| lo > hi) {
                return Err(Error::InvalidArgument("input lower bound exceeds upper bound".into()));
            }
            let lo = layout.push("u_lo", SegmentKind::Constraint, m)?;
            let hi = layout.push("u_hi", SegmentKind::Constraint, m)?;
            Some((lo, hi))
        }
        None => None,
    };
    let n_params = layout.len();
    let mut params = ParameterVector::new(Arc::new(layout), DVector::zeros(n_params))?;
    params.set_segment("A", &linalg::to_row_vec(&data.a))?;
    params.set_segment("B", &linalg::to_row_vec(&data.b))?;
    params.set_segment("Q", &linalg::to_row_vec(&data.q))?;
    params.set_segment("R", &linalg::to_row_vec(&data.r))?;
    params.set_segment("P", &linalg::to_row_vec(&data.p_terminal))?;
    params.set_segment("c", &[data.terminal_offset])?;

    let ineq_constraints = match (&data.bounds, bound_offsets) {
        (Some(bounds), Some((lo, hi))) => {
            params.set_segment("u_lo", bounds.lower.as_slice())?;
            params.set_segment("u_hi", bounds.upper.as_slice())?;
            Some(Arc::new(InputBox {
                n,
                m,
                lo_offset: lo,
                hi_offset: hi,
                n_params,
            }) as Arc<dyn super::SmoothMap>)
        }
        _ => None,
    };

    OcpSpec::new(OcpParts {
        horizon: data.horizon,
        n,
        m,
        stage_cost: Arc::new(QuadraticStageCost {
            n,
            m,
            q_offset: q_off,
            r_offset: r_off,
            n_params,
        }),
        terminal_cost: Arc::new(QuadraticTerminalCost {
            n,
            p_offset: p_off,
            constant_offset: Some(c_off),
            n_params,
        }),
        dynamics: Arc::new(LinearDynamics {
            n,
            m,
            a_offset: a_off,
            b_offset: b_off,
            n_params,
        }),
        eq_constraints: None,
        ineq_constraints,
        gamma: data.gamma,
        discount_in_horizon: data.discount_in_horizon,
        params,
    })
}

/// Read the model matrices `(A, B)` back out of an LQ parameter vector.
pub fn lq_model_matrices(params: &ParameterVector, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = params.segment("A")?;
    let b = params.segment("B")?;
    if a.len() != n * n {
        return Err(Error::dim("A segment", n * n, a.len()));
    }
    if b.len() != n * m {
        return Err(Error::dim("B segment", n * m, b.len()));
    }
    Ok((
        DMatrix::from_row_slice(n, n, a),
        DMatrix::from_row_slice(n, m, b),
    ))
}
