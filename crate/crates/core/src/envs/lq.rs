use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{ActionVec, Environment, SimRng, StateVec};

/// Linear system `s' = As + Ba + w` with reward `-(s'Qs + a'Ra)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqEnvConfig {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Per-state standard deviation of `w`.
    pub noise_std: DVector<f64>,
    /// Initial states are drawn uniformly from `[x0_low, x0_high]`; equal
    /// bounds give a fixed start.
    pub x0_low: DVector<f64>,
    pub x0_high: DVector<f64>,
}

impl LqEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if !self.a.is_square() {
            return Err(Error::dim("A columns", n, self.a.ncols()));
        }
        if self.b.nrows() != n {
            return Err(Error::dim("B rows", n, self.b.nrows()));
        }
        let m = self.b.ncols();
        if self.q.shape() != (n, n) {
            return Err(Error::dim("Q rows", n, self.q.nrows()));
        }
        if self.r.shape() != (m, m) {
            return Err(Error::dim("R rows", m, self.r.nrows()));
        }
        for (what, v) in [("noise_std", &self.noise_std), ("x0_low", &self.x0_low), ("x0_high", &self.x0_high)] {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
        }
        if self.noise_std.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
        }
        if self.x0_low.iter().zip(self.x0_high.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("x0_low exceeds x0_high".into()));
        }
        if !linalg::is_symmetric(&self.q, 1e-12) || linalg::min_eigenvalue(&self.q) < -1e-12 {
            return Err(Error::InvalidArgument("Q must be symmetric positive semidefinite".into()));
        }
        if !linalg::is_symmetric(&self.r, 1e-12) || linalg::min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

pub fn lq_step(cfg: &LqEnvConfig, s: &StateVec, a: &ActionVec, rng: &mut SimRng) -> Result<(f64, StateVec)> {
    let n = cfg.a.nrows();
    if s.len() != n {
        return Err(Error::dim("state", n, s.len()));
    }
    if a.len() != cfg.b.ncols() {
        return Err(Error::dim("action", cfg.b.ncols(), a.len()));
    }
    let s = s.as_vector();
    let a = a.as_vector();
    let r = -((s.transpose() * &cfg.q * s)[0] + (a.transpose() * &cfg.r * a)[0]);
    let mut next = &cfg.a * s + &cfg.b * a;
    for i in 0..n {
        if cfg.noise_std[i] > 0.0 {
            let w: f64 = StandardNormal.sample(rng);
            next[i] += cfg.noise_std[i] * w;
        }
    }
    Ok((r, StateVec::new(next)?))
}

#[derive(Debug, Clone)]
pub struct LqEnv {
    cfg: LqEnvConfig,
}

impl LqEnv {
    pub fn new(cfg: LqEnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &LqEnvConfig {
        &self.cfg
    }
}

impl Environment for LqEnv {
    fn state_dim(&self) -> usize {
        self.cfg.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.cfg.b.ncols()
    }

    fn reset(&self, rng: &mut SimRng) -> StateVec {
        let x = DVector::from_fn(self.state_dim(), |i, _| {
            let (lo, hi) = (self.cfg.x0_low[i], self.cfg.x0_high[i]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        });
        StateVec::new(x).expect("finite box")
    }

    fn step(&self, s: &StateVec, a: &ActionVec, rng: &mut SimRng) -> Result<(f64, StateVec)> {
        lq_step(&self.cfg, s, a, rng)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dp::riccati_solve;
    use crate::mdp::{discounted_return, rng_from_seed, rollout_from, DiscountConfig};

    fn cfg(a: DMatrix<f64>, b: DMatrix<f64>) -> LqEnvConfig {
        let n = a.nrows();
        let m = b.ncols();
        LqEnvConfig {
            a,
            b,
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m) * 0.5,
            noise_std: DVector::zeros(n),
            x0_low: DVector::from_element(n, 1.0),
            x0_high: DVector::from_element(n, 1.0),
        }
    }

    fn sv(v: &[f64]) -> StateVec {
        StateVec::from_slice(v).unwrap()
    }

    #[test]
    fn identity_system_holds_state() {
        let c = cfg(DMatrix::identity(2, 2), DMatrix::zeros(2, 1));
        let s = sv(&[0.3, -2.0]);
        let (r, next) = lq_step(&c, &s, &ActionVec::from_slice(&[5.0]).unwrap(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(next, s);
        assert!((r + 0.09 + 4.0 + 12.5).abs() < 1e-12);
    }

    #[test]
    fn origin_is_fixed_with_zero_reward() {
        let c = cfg(DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 2.0]), DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        let (r, next) = lq_step(&c, &sv(&[0.0, 0.0]), &ActionVec::zeros(1), &mut rng_from_seed(0)).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(next, sv(&[0.0, 0.0]));
    }

    #[test]
    fn riccati_closed_loop_return_approaches_value() {
        let c = cfg(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        );
        let gamma = DiscountConfig::new(0.9).unwrap();
        let sol = riccati_solve(&c.a, &c.b, &c.q, &c.r, gamma).unwrap();
        let env = LqEnv::new(c).unwrap();
        let s0 = sv(&[1.0, -1.0]);
        let v = -(s0.transpose() * &sol.p * s0.as_vector())[0];
        let k = sol.k.clone();
        let mut policy = |s: &StateVec, _: &mut SimRng| ActionVec::new(-(&k * s.as_vector()));
        let traj = rollout_from(&env, &mut policy, s0, 400, 1).unwrap();
        assert!((discounted_return(&traj, gamma) - v).abs() < 1e-10 * v.abs());
    }

    #[test]
    fn noise_is_seeded() {
        let mut c = cfg(DMatrix::identity(2, 2), DMatrix::identity(2, 1));
        c.noise_std = DVector::from_element(2, 0.1);
        let s = sv(&[0.0, 0.0]);
        let a = ActionVec::zeros(1);
        let x = lq_step(&c, &s, &a, &mut rng_from_seed(7)).unwrap().1;
        let y = lq_step(&c, &s, &a, &mut rng_from_seed(7)).unwrap().1;
        assert_eq!(x, y);
        assert!(x.amax() > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(DMatrix::identity(2, 2), DMatrix::identity(2, 1));
        c.r = DMatrix::zeros(1, 1);
        assert!(LqEnv::new(c).is_err());
        let mut c = cfg(DMatrix::identity(2, 2), DMatrix::identity(2, 1));
        c.noise_std = DVector::zeros(3);
        assert!(matches!(LqEnv::new(c), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn noiseless_step_is_linear(
            s1 in prop::collection::vec(-5.0..5.0f64, 2),
            s2 in prop::collection::vec(-5.0..5.0f64, 2),
            a1 in -3.0..3.0f64,
            a2 in -3.0..3.0f64,
        ) {
            let c = cfg(
                DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 1.1]),
                DMatrix::from_row_slice(2, 1, &[0.3, -0.7]),
            );
            let mut rng = rng_from_seed(0);
            let step = |s: &[f64], a: f64, rng: &mut SimRng| {
                lq_step(&c, &sv(s), &ActionVec::from_slice(&[a]).unwrap(), rng).unwrap().1.into_inner()
            };
            let sum: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| x + y).collect();
            let lhs = step(&sum, a1 + a2, &mut rng);
            let rhs = step(&s1, a1, &mut rng) + step(&s2, a2, &mut rng);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
