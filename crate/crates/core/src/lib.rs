//! Parametric model predictive control as a Q-function and policy
//! approximator.
//!
//! The crate is layered bottom-up:
//!
//! - [`mdp`]: states, transitions, environments, rollouts and Monte Carlo returns.
//! - [`dp`]: exact dynamic-programming oracles (tabular value iteration, discounted Riccati).
//! - [`ocp`]: the parametric optimal-control problem and its parameter layout.
//! - [`solver`]: multiple-shooting SQP with a primal active-set QP core.
//! - [`sensitivity`]: parameter derivatives of the MPC value and policy.
//! - [`rl`]: TD learning, REINFORCE, value fitting and cost-perturbation exploration.
//! - [`envs`]: the linear-quadratic and CSTR case-study environments.
//! - [`harness`]: experiment configs, runners and metric outputs.

pub mod dp;
pub mod envs;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod ocp;
pub mod rl;
pub mod sensitivity;
pub mod solver;

pub use error::{Error, Result};
