//! Learning drivers for the parametric MPC: TD learning on its Q-function,
//! REINFORCE on its policy, Monte Carlo fitting of a terminal value
//! function, and cost-perturbation exploration.
//!
//! Sign conventions: the MPC minimizes cost, the learner maximizes reward,
//! and `Q_phi(s, a) = -Q^MPC(s, a)`.

mod explore;
mod reinforce;
mod td;
mod value;

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DiscountConfig, SimRng, Transition};
use crate::ocp::ParameterVector;
use crate::solver::SolverSettings;

pub use explore::perturbed_cost_exploration;
pub use reinforce::{
    reinforce_from_scores, reinforce_gradient, simulate_episodes, EpisodeScore, GaussianMpcPolicy, ReinforceOptions, ReinforceResult,
    RunningBaseline,
};
pub use td::{q_learning_update, td_error, td_loss_and_grad, QUpdate, TdOptions, TdResult};
pub use value::{fit_value_function, ValueFeatures, ValueFit, ValueModel, ValueTerminalCost, RIDGE_FALLBACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascent,
    Descent,
}

/// `phi +/- alpha grad`. No projection. A non-finite gradient is rejected
/// and `phi` is left untouched.
pub fn gradient_step(
    phi: &ParameterVector,
    grad: &DVector<f64>,
    alpha: f64,
    direction: Direction,
) -> Result<ParameterVector> {
    if grad.len() != phi.len() {
        return Err(Error::dim("gradient", phi.len(), grad.len()));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite("step size".into()));
    }
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    phi.with_values(phi.values() + grad * (sign * alpha))
}

/// Zero the gradient outside the learnable entries.
pub fn mask_gradient(grad: &DVector<f64>, mask: &[bool]) -> Result<DVector<f64>> {
    if mask.len() != grad.len() {
        return Err(Error::dim("gradient mask", grad.len(), mask.len()));
    }
    Ok(DVector::from_fn(grad.len(), |i, _| if mask[i] { grad[i] } else { 0.0 }))
}

/// Exploration noise per episode: `max(initial * decay^episode, min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSchedule {
    pub initial: Vec<f64>,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default)]
    pub min: f64,
}

fn one() -> f64 {
    1.0
}

impl SigmaSchedule {
    pub fn at(&self, episode: usize) -> DVector<f64> {
        let f = self.decay.powi(episode as i32);
        DVector::from_iterator(self.initial.len(), self.initial.iter().map(|s| (s * f).max(self.min)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub gamma: DiscountConfig,
    /// Episodes per gradient estimate (REINFORCE) or transitions per
    /// update (TD).
    pub batch: usize,
    /// Number of updates.
    pub episodes: usize,
    /// Steps per simulated episode.
    pub steps: usize,
    pub seed: u64,
    pub sigma: SigmaSchedule,
    /// Norm of the random linear cost term used for exploration.
    #[serde(default)]
    pub perturbation_scale: f64,
    /// Parameter segments that are updated; all others stay fixed.
    pub learnable: Vec<String>,
    #[serde(default)]
    pub full_gradient: bool,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if self.sigma.initial.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        if !(self.sigma.decay > 0.0 && self.sigma.decay <= 1.0) || self.sigma.min < 0.0 {
            return Err(Error::InvalidArgument("sigma decay must lie in (0, 1] and min be nonnegative".into()));
        }
        if !(self.perturbation_scale >= 0.0) {
            return Err(Error::InvalidArgument("perturbation_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Bounded FIFO of transitions with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    transitions: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be at least 1".into()));
        }
        Ok(Self {
            transitions: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Append, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.transitions.len() == self.capacity {
            self.transitions.pop_front();
        }
        self.transitions.push_back(t);
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    /// `size` draws with replacement.
    pub fn sample(&self, size: usize, rng: &mut SimRng) -> Result<Vec<Transition>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..size)
            .map(|_| self.transitions[rng.random_range(0..self.transitions.len())].clone())
            .collect())
    }
}

#[cfg(test)]
mod tests;

#[cfg(test)]
pub(crate) mod fixtures;
