//! Small LQ problems shared by the learning tests.

use nalgebra::{DMatrix, DVector};

use crate::dp::{riccati_solve, RiccatiSolution};
use crate::envs::{LqEnv, LqEnvConfig};
use crate::mdp::DiscountConfig;
use crate::ocp::{build_lq_ocp, InputBounds, LqOcpData, OcpSpec};

pub struct LqFixture {
    pub env: LqEnv,
    pub spec: OcpSpec,
    pub riccati: RiccatiSolution,
    pub gamma: DiscountConfig,
}

pub fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Double integrator with the Riccati terminal cost.
pub fn double_integrator(horizon: usize, gamma: f64) -> LqFixture {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.03125, 0.25]);
    build(a, b, DMatrix::identity(2, 2), m1(0.5), horizon, gamma, None, 1.0)
}

/// `x+ = 0.9 x + 0.5 u`, `l = x^2 + 0.1 u^2`.
pub fn scalar(horizon: usize, gamma: f64, bounds: Option<(f64, f64)>) -> LqFixture {
    build(m1(0.9), m1(0.5), m1(1.0), m1(0.1), horizon, gamma, bounds, 1.0)
}

#[allow(clippy::too_many_arguments)]
pub fn build(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    horizon: usize,
    gamma: f64,
    bounds: Option<(f64, f64)>,
    x0: f64,
) -> LqFixture {
    let gamma = DiscountConfig::new(gamma).unwrap();
    let riccati = riccati_solve(&a, &b, &q, &r, gamma).unwrap();
    let n = a.nrows();
    let m = b.ncols();
    let spec = build_lq_ocp(&LqOcpData {
        a: a.clone(),
        b: b.clone(),
        q: q.clone(),
        r: r.clone(),
        p_terminal: riccati.p.clone(),
        terminal_offset: 0.0,
        horizon,
        bounds: bounds.map(|(lo, hi)| InputBounds {
            lower: DVector::from_element(m, lo),
            upper: DVector::from_element(m, hi),
        }),
        gamma,
        discount_in_horizon: true,
    })
    .unwrap();
    let env = LqEnv::new(LqEnvConfig {
        a,
        b,
        q,
        r,
        noise_std: DVector::zeros(n),
        x0_low: DVector::from_element(n, -x0),
        x0_high: DVector::from_element(n, x0),
    })
    .unwrap();
    LqFixture {
        env,
        spec,
        riccati,
        gamma,
    }
}
