use std::sync::Arc;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::rng_from_seed;
use crate::ocp::{LinearCostPerturbation, OcpSpec};

/// The spec with a seeded random linear term `c'u` added to the stage
/// cost, `|c| = scale`. Dynamics and constraints are shared unchanged, so
/// every perturbed plan is feasible for the original problem. Returns the
/// spec and `c`.
pub fn perturbed_cost_exploration(spec: &OcpSpec, scale: f64, seed: u64) -> Result<(OcpSpec, DVector<f64>)> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument("perturbation scale must be nonnegative".into()));
    }
    let m = spec.action_dim();
    let mut rng = rng_from_seed(seed);
    let mut dir = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let norm = dir.norm();
    // A zero draw has probability zero; keep the result well defined anyway.
    if norm > 0.0 {
        dir /= norm;
    } else {
        dir = DVector::zeros(m);
        dir[0] = 1.0;
    }
    let c = dir * scale;
    let stage = LinearCostPerturbation {
        inner: spec.stage_cost.clone(),
        n: spec.state_dim(),
        c: c.clone(),
    };
    Ok((spec.with_stage_cost(Arc::new(stage))?, c))
}
