//! Markov decision process primitives: vectors, transitions, environments,
//! rollouts, and Monte Carlo return estimation.
//!
//! Every rollout owns its own generator. Generators are seeded from a
//! `(master seed, index path)` pair through [`derive_seed`], which folds
//! each index into the seed with a SplitMix64 finalizer. Two rollouts with
//! different episode indices therefore never share a stream, and a rollout
//! can be replayed in isolation from its derived seed alone.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Generator used for all simulation randomness.
pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of indices
/// (e.g. `[run, episode]`). `seed_i = splitmix64(seed_{i-1} ^ splitmix64(index_i + 1))`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &i| splitmix64(acc ^ splitmix64(i.wrapping_add(1))))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

macro_rules! finite_vector_newtype {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(DVector<f64>);

        impl $name {
            pub fn new(values: DVector<f64>) -> Result<Self> {
                if values.iter().all(|v| v.is_finite()) {
                    Ok(Self(values))
                } else {
                    Err(Error::NonFinite($what.into()))
                }
            }

            pub fn from_slice(values: &[f64]) -> Result<Self> {
                Self::new(DVector::from_column_slice(values))
            }

            pub fn zeros(dim: usize) -> Self {
                Self(DVector::zeros(dim))
            }

            pub fn as_vector(&self) -> &DVector<f64> {
                &self.0
            }

            pub fn into_inner(self) -> DVector<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = DVector<f64>;
            fn deref(&self) -> &DVector<f64> {
                &self.0
            }
        }
    };
}

finite_vector_newtype!(StateVec, "state");
finite_vector_newtype!(ActionVec, "action");

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: StateVec,
    pub a: ActionVec,
    pub r: f64,
    pub s_next: StateVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|t| t.r)
    }

    /// Visited states `s_0, ..., s_T` (T + 1 entries).
    pub fn states(&self) -> Vec<&StateVec> {
        let mut out: Vec<&StateVec> = self.steps.iter().map(|t| &t.s).collect();
        if let Some(last) = self.steps.last() {
            out.push(&last.s_next);
        }
        out
    }

    /// Checks that each transition starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].s_next == w[1].s)
    }
}

/// Discount factor, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DiscountConfig(f64);

impl DiscountConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(Self(gamma))
        } else {
            Err(Error::InvalidArgument(format!(
                "discount factor must lie in (0, 1), got {gamma}"
            )))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for DiscountConfig {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DiscountConfig> for f64 {
    fn from(d: DiscountConfig) -> f64 {
        d.0
    }
}

/// An environment is a Markov kernel plus a reward function. `step` may only
/// depend on its arguments and the generator.
pub trait Environment: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&self, rng: &mut SimRng) -> StateVec;
    fn step(&self, s: &StateVec, a: &ActionVec, rng: &mut SimRng) -> Result<(f64, StateVec)>;
}

/// A (possibly stochastic) state-feedback policy.
pub trait Policy {
    fn act(&mut self, s: &StateVec, rng: &mut SimRng) -> Result<ActionVec>;
}

impl<F> Policy for F
where
    F: FnMut(&StateVec, &mut SimRng) -> Result<ActionVec>,
{
    fn act(&mut self, s: &StateVec, rng: &mut SimRng) -> Result<ActionVec> {
        self(s, rng)
    }
}

/// Simulate `steps` transitions from a state drawn by `env.reset`.
pub fn rollout<E, P>(env: &E, policy: &mut P, steps: usize, seed: u64) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    let mut rng = rng_from_seed(seed);
    let s0 = env.reset(&mut rng);
    rollout_with_rng(env, policy, s0, steps, seed, &mut rng)
}

/// Simulate `steps` transitions from a fixed initial state.
pub fn rollout_from<E, P>(
    env: &E,
    policy: &mut P,
    s0: StateVec,
    steps: usize,
    seed: u64,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    let mut rng = rng_from_seed(seed);
    rollout_with_rng(env, policy, s0, steps, seed, &mut rng)
}

fn rollout_with_rng<E, P>(
    env: &E,
    policy: &mut P,
    s0: StateVec,
    steps: usize,
    seed: u64,
    rng: &mut SimRng,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    if s0.len() != env.state_dim() {
        return Err(Error::dim("initial state", env.state_dim(), s0.len()));
    }
    let mut s = s0;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let a = policy.act(&s, rng)?;
        if a.len() != env.action_dim() {
            return Err(Error::dim(format!("policy action at step {t}"), env.action_dim(), a.len()));
        }
        let (r, s_next) = match env.step(&s, &a, rng) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) | Err(Error::Divergence { .. }) => {
                return Err(Error::Divergence { step: t })
            }
            Err(e) => return Err(e),
        };
        if !r.is_finite() || !s_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        out.push(Transition {
            s: s.clone(),
            a,
            r,
            s_next: s_next.clone(),
        });
        s = s_next;
    }
    Ok(Trajectory { steps: out, seed })
}

/// `sum_t gamma^t r_t` over the (truncated) trajectory.
pub fn discounted_return(traj: &Trajectory, gamma: DiscountConfig) -> f64 {
    let g = gamma.gamma();
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in traj.rewards() {
        total += weight * r;
        weight *= g;
    }
    total
}

/// Upper bound on the tail `|sum_{t >= T} gamma^t r_t|` when `|r| <= r_max`.
pub fn truncation_bound(gamma: DiscountConfig, steps: usize, r_max: f64) -> f64 {
    let g = gamma.gamma();
    g.powi(steps as i32) * r_max / (1.0 - g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    /// Sample standard deviation divided by `sqrt(episodes)`.
    pub stderr: f64,
    pub returns: Vec<f64>,
}

impl ReturnEstimate {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, stderr) = mean_and_stderr(&returns);
        Self {
            mean,
            stderr,
            returns,
        }
    }
}

/// Sample mean and standard error (n - 1 normalization; zero for a single sample).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of the discounted objective. Episode `i` uses the
/// seed `derive_seed(seed, [i])`.
pub fn estimate_j<E, P>(
    env: &E,
    policy: &mut P,
    episodes: usize,
    steps: usize,
    gamma: DiscountConfig,
    seed: u64,
) -> Result<ReturnEstimate>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    if episodes == 0 {
        return Err(Error::InvalidArgument("estimate_j needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let traj = rollout(env, policy, steps, derive_seed(seed, &[ep as u64])).map_err(|e| {
            Error::Episode {
                episode: ep,
                source: Box::new(e),
            }
        })?;
        returns.push(discounted_return(&traj, gamma));
    }
    Ok(ReturnEstimate::from_returns(returns))
}

/// Finite MDP with an explicit transition tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `[s][a][s']`.
    transitions: Vec<f64>,
    rewards: DMatrix<f64>,
    gamma: DiscountConfig,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: DMatrix<f64>,
        gamma: DiscountConfig,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("tabular MDP needs states and actions".into()));
        }
        let expected = n_states * n_actions * n_states;
        if transitions.len() != expected {
            return Err(Error::dim("transition tensor", expected, transitions.len()));
        }
        if rewards.nrows() != n_states || rewards.ncols() != n_actions {
            return Err(Error::dim("reward matrix rows", n_states, rewards.nrows()));
        }
        if !rewards.iter().all(|r| r.is_finite()) {
            return Err(Error::NonFinite("tabular rewards".into()));
        }
        for (i, row) in transitions.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "transition row (s={}, a={}) is not a probability vector (sum {sum})",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        })
    }

    /// Random MDP with dense Dirichlet-like rows and rewards in [-1, 1].
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: DiscountConfig,
        rng: &mut R,
    ) -> Self {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            // Push the rounding error into the largest entry so the row sums to 1.
            let err = 1.0 - row.iter().sum::<f64>();
            let imax = (0..n_states)
                .max_by(|&i, &j| row[i].total_cmp(&row[j]))
                .unwrap_or(0);
            row[imax] += err;
            transitions.extend(row);
        }
        let rewards = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random_range(-1.0..1.0));
        Self::new(n_states, n_actions, transitions, rewards, gamma)
            .expect("randomly generated MDP is valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> DiscountConfig {
        self.gamma
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[(s, a)]
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    /// `P[s][a][.]`
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }
}

/// A tabular MDP exposed through the continuous [`Environment`] interface:
/// states and actions are one-element vectors holding the index.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    pub initial_state: usize,
}

impl TabularEnv {
    fn index(v: &DVector<f64>, bound: usize, what: &str) -> Result<usize> {
        let x = v[0];
        if x < 0.0 || x.fract() != 0.0 || x as usize >= bound {
            return Err(Error::InvalidArgument(format!("{what} index {x} out of range")));
        }
        Ok(x as usize)
    }
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&self, _rng: &mut SimRng) -> StateVec {
        StateVec::zeros(1).with_value(self.initial_state as f64)
    }

    fn step(&self, s: &StateVec, a: &ActionVec, rng: &mut SimRng) -> Result<(f64, StateVec)> {
        let si = Self::index(s, self.mdp.n_states(), "state")?;
        let ai = Self::index(a, self.mdp.n_actions(), "action")?;
        let row = self.mdp.transition_row(si, ai);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        Ok((self.mdp.reward(si, ai), StateVec::zeros(1).with_value(next as f64)))
    }
}

impl StateVec {
    fn with_value(mut self, v: f64) -> Self {
        self.0[0] = v;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// s' = s, r = 1.
    struct Constant {
        dim: usize,
    }

    impl Environment for Constant {
        fn state_dim(&self) -> usize {
            self.dim
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn reset(&self, _rng: &mut SimRng) -> StateVec {
            StateVec::from_slice(&vec![0.5; self.dim]).unwrap()
        }
        fn step(&self, s: &StateVec, _a: &ActionVec, _rng: &mut SimRng) -> Result<(f64, StateVec)> {
            Ok((1.0, s.clone()))
        }
    }

    struct Exploding;

    impl Environment for Exploding {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn reset(&self, _rng: &mut SimRng) -> StateVec {
            StateVec::from_slice(&[1.0]).unwrap()
        }
        fn step(&self, s: &StateVec, _a: &ActionVec, _rng: &mut SimRng) -> Result<(f64, StateVec)> {
            let next = s[0] * 1e200;
            Ok((0.0, StateVec(DVector::from_element(1, next))))
        }
    }

    fn zero_policy(_: &StateVec, _: &mut SimRng) -> Result<ActionVec> {
        Ok(ActionVec::zeros(1))
    }

    #[test]
    fn constant_env_rollout() {
        let traj = rollout(&Constant { dim: 2 }, &mut zero_policy, 3, 7).unwrap();
        assert_eq!(traj.len(), 3);
        assert!(traj.steps.iter().all(|t| t.r == 1.0 && t.s == t.s_next));
        assert!(traj.is_chained());
    }

    #[test]
    fn wrong_action_dimension_is_reported() {
        let mut bad = |_: &StateVec, _: &mut SimRng| Ok(ActionVec::zeros(3));
        let err = rollout(&Constant { dim: 1 }, &mut bad, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 1, got: 3, .. }));
    }

    #[test]
    fn divergence_names_the_step() {
        let err = rollout(&Exploding, &mut zero_policy, 5, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1 }), "{err:?}");
    }

    #[test]
    fn discounted_return_direct_sum() {
        let traj = rollout(&Constant { dim: 1 }, &mut zero_policy, 3, 0).unwrap();
        let g = discounted_return(&traj, DiscountConfig::new(0.9).unwrap());
        assert!((g - 2.71).abs() < 1e-12);
        let g0 = discounted_return(&traj, DiscountConfig::new(1e-12).unwrap());
        assert!((g0 - 1.0).abs() < 1e-11);
    }

    #[test]
    fn deterministic_env_has_zero_stderr() {
        let est = estimate_j(
            &Constant { dim: 1 },
            &mut zero_policy,
            5,
            10,
            DiscountConfig::new(0.5).unwrap(),
            3,
        )
        .unwrap();
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.returns.len(), 5);
    }

    #[test]
    fn one_state_mdp_geometric_series() {
        let mdp = TabularMdp::new(
            1,
            1,
            vec![1.0],
            DMatrix::from_element(1, 1, 1.0),
            DiscountConfig::new(0.9).unwrap(),
        )
        .unwrap();
        let env = TabularEnv {
            mdp,
            initial_state: 0,
        };
        let est = estimate_j(&env, &mut zero_policy, 4, 200, DiscountConfig::new(0.9).unwrap(), 1)
            .unwrap();
        assert!((est.mean - 10.0).abs() < 1e-8, "{}", est.mean);
    }

    #[test]
    fn tabular_mdp_rejects_bad_rows() {
        let err = TabularMdp::new(
            1,
            1,
            vec![0.9],
            DMatrix::zeros(1, 1),
            DiscountConfig::new(0.9).unwrap(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn discount_bounds() {
        assert!(DiscountConfig::new(0.0).is_err());
        assert!(DiscountConfig::new(1.0).is_err());
        assert!(DiscountConfig::new(0.99).is_ok());
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }
}
