use nalgebra::DVector;
use rayon::prelude::*;

use super::{gradient_step, mask_gradient, Direction, LearnerConfig, ReplayBuffer};
use crate::error::{Error, Result};
use crate::mdp::{DiscountConfig, SimRng, Transition};
use crate::ocp::OcpSpec;
use crate::sensitivity::grad_q_wrt_params;
use crate::solver::{SolverSettings, SqpSolver};

/// `Q(s, a) - (r + gamma max_a' Q(s', a'))`, reward sign.
pub fn td_error(q: f64, r: f64, gamma: f64, q_next_max: f64) -> f64 {
    q - (r + gamma * q_next_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TdOptions {
    /// Also differentiate the target (residual gradient).
    pub full_gradient: bool,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdResult {
    /// Mean squared TD error over the samples that were used.
    pub loss: f64,
    /// Gradient of `loss` in `phi`.
    pub grad: DVector<f64>,
    pub used: usize,
    /// Samples dropped because a solve failed.
    pub skipped: usize,
}

struct Sample {
    delta: f64,
    dq: DVector<f64>,
}

fn td_sample(spec: &OcpSpec, t: &Transition, gamma: f64, opts: &TdOptions) -> Result<Sample> {
    let solver = SqpSolver::new(SolverSettings {
        accept_max_iter: false,
        ..opts.solver
    });
    let (cost, kkt) = solver.qvalue(spec, &t.s, &t.a, None)?;
    let (_, next) = solver.policy(spec, &t.s_next, None)?;
    let delta = td_error(-cost, t.r, gamma, -next.objective);
    // d delta / d phi = -dQ^MPC(s,a) [+ gamma dV^MPC(s')]
    let mut dq = -grad_q_wrt_params(spec, &kkt)?
        .gradient()
        .expect("value gradient")
        .clone();
    if opts.full_gradient {
        dq += grad_q_wrt_params(spec, &next)?.gradient().expect("value gradient") * gamma;
    }
    Ok(Sample { delta, dq })
}

/// Mean squared TD error of `Q_phi = -Q^MPC` on `batch` and its gradient
/// in the spec's parameters. The target is detached unless
/// `opts.full_gradient`. Samples whose solves fail are skipped and counted.
pub fn td_loss_and_grad(
    spec: &OcpSpec,
    batch: &[Transition],
    gamma: DiscountConfig,
    opts: &TdOptions,
) -> Result<TdResult> {
    let (n, m) = (spec.state_dim(), spec.action_dim());
    for t in batch {
        if t.s.len() != n || t.s_next.len() != n {
            return Err(Error::dim("transition state", n, t.s.len()));
        }
        if t.a.len() != m {
            return Err(Error::dim("transition action", m, t.a.len()));
        }
    }
    let g = gamma.gamma();
    let samples: Vec<Result<Sample>> = batch.par_iter().map(|t| td_sample(spec, t, g, opts)).collect();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(spec.params().len());
    let mut used = 0;
    let mut skipped = 0;
    for s in samples {
        match s {
            Ok(Sample { delta, dq }) => {
                loss += delta * delta;
                grad += dq * (2.0 * delta);
                used += 1;
            }
            Err(e) if e.is_numerical() => {
                log::debug!("td sample skipped: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::AllSkipped { skipped });
    }
    Ok(TdResult {
        loss: loss / used as f64,
        grad: grad / used as f64,
        used,
        skipped,
    })
}

#[derive(Debug, Clone)]
pub struct QUpdate {
    pub spec: OcpSpec,
    /// Loss before the update.
    pub loss: f64,
    pub skipped: usize,
}

/// One descent step on the TD loss of a batch drawn from `buffer`. Only
/// the segments in `cfg.learnable` move.
pub fn q_learning_update(
    spec: &OcpSpec,
    buffer: &ReplayBuffer,
    cfg: &LearnerConfig,
    rng: &mut SimRng,
) -> Result<QUpdate> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("q-learning needs a nonempty buffer".into()));
    }
    let names: Vec<&str> = cfg.learnable.iter().map(String::as_str).collect();
    let mask = spec.params().layout().mask(&names)?;
    let batch = buffer.sample(cfg.batch, rng)?;
    let opts = TdOptions {
        full_gradient: cfg.full_gradient,
        solver: cfg.solver,
    };
    let td = td_loss_and_grad(spec, &batch, cfg.gamma, &opts)?;
    let grad = mask_gradient(&td.grad, &mask)?;
    let params = gradient_step(spec.params(), &grad, cfg.alpha, Direction::Descent)?;
    Ok(QUpdate {
        spec: spec.with_params(params)?,
        loss: td.loss,
        skipped: td.skipped,
    })
}
