use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::{CstrSection, EnvSection, ExperimentConfig, MetricsRow, RunOutputs};
use crate::dp::riccati_solve;
use crate::envs::{constraint_violation_count, cstr_integrate, cstr_integrate_with_jacobian, cstr_step, CstrConfig};
use crate::error::{Error, Result};
use crate::mdp::{derive_seed, rng_from_seed, ActionVec, DiscountConfig, StateVec};
use crate::ocp::{build_cstr_ocp, CstrOcpData, CstrScaling, CstrTrackingTerminal, OcpSpec, SmoothMap};
use crate::rl::{fit_value_function, ValueModel, ValueTerminalCost};
use crate::solver::{KktPoint, SqpSolver};

const NP: usize = 4;
const N: usize = 6;
const M: usize = 2;

pub(super) fn validate_section(env: &CstrConfig, sec: &CstrSection) -> Result<()> {
    sec.scaling.validate()?;
    if !(sec.cost_scale > 0.0 && sec.cost_scale.is_finite()) {
        return Err(Error::Config("cstr.cost_scale must be positive".into()));
    }
    if !(sec.backoff >= 0.0) {
        return Err(Error::Config("cstr.backoff must be nonnegative".into()));
    }
    if sec.steps == 0 {
        return Err(Error::Config("cstr.steps must be at least 1".into()));
    }
    if sec.initial_state.len() != N || sec.initial_state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("cstr.initial_state needs {N} finite entries")));
    }
    if !(sec.default_terminal_weight >= 0.0) {
        return Err(Error::Config("cstr.default_terminal_weight must be nonnegative".into()));
    }
    let v = &sec.value;
    v.features.validate(N)?;
    if v.rollouts == 0 || v.fit_steps == 0 || v.fit_steps > v.rollout_steps {
        return Err(Error::Config("cstr.value needs rollouts >= 1 and 1 <= fit_steps <= rollout_steps".into()));
    }
    if !(v.rmse_max > 0.0) {
        return Err(Error::Config("cstr.value.rmse_max must be positive".into()));
    }
    if v.x0_low.len() != N || v.x0_high.len() != N || v.x0_low.iter().zip(&v.x0_high).any(|(l, h)| !(l <= h)) {
        return Err(Error::Config(format!("cstr.value start box needs {N} ordered bounds")));
    }
    let b = &v.behavior;
    if b.input.len() != M || !env.input_box.contains(&b.input, 0.0) {
        return Err(Error::Config("cstr.value.behavior.input must lie in the input box".into()));
    }
    if b.state_weights.len() != NP || b.state_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config(format!("cstr.value.behavior.state_weights needs {NP} nonnegative entries")));
    }
    if b.input_weights.len() != M || b.input_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Config(format!("cstr.value.behavior.input_weights needs {M} positive entries")));
    }
    Ok(())
}

/// Linear feedback `u = sat(u_ss - K (x - x_ss))` on the physical state.
#[derive(Debug, Clone)]
struct Behavior {
    x_ss: DVector<f64>,
    u_ss: DVector<f64>,
    k: DMatrix<f64>,
}

impl Behavior {
    fn action(&self, env: &CstrConfig, s: &StateVec) -> ActionVec {
        let dx = DVector::from_fn(NP, |i, _| s[i] - self.x_ss[i]);
        let mut u: Vec<f64> = (&self.u_ss - &self.k * dx).iter().copied().collect();
        env.input_box.clamp(&mut u);
        ActionVec::from_slice(&u).expect("finite feedback")
    }
}

/// Steady state under a constant input, by simulation.
fn steady_state(env: &CstrConfig, u: &[f64], start: &[f64], steps: usize) -> Result<[f64; NP]> {
    let mut x: [f64; NP] = std::array::from_fn(|i| start[i]);
    let mut change = f64::INFINITY;
    for _ in 0..steps {
        let next = cstr_integrate(&env.params, &x, u, env.dt, env.substeps);
        change = (0..NP).map(|i| (next[i] - x[i]).abs() / (1.0 + x[i].abs())).fold(0.0, f64::max);
        x = next;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: 0 });
        }
        if change < 1e-13 {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        what: "steady-state simulation",
        iterations: steps,
        residual: change,
    })
}

fn behavior(env: &CstrConfig, sec: &CstrSection, gamma: DiscountConfig) -> Result<Behavior> {
    let b = &sec.value.behavior;
    let x_ss = steady_state(env, &b.input, &sec.initial_state, b.settle_steps)?;
    let (_, jac) = cstr_integrate_with_jacobian(&env.params, &x_ss, &b.input, env.dt, env.substeps);
    let a = jac.columns(0, NP).into_owned();
    let bm = jac.columns(NP, M).into_owned();
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&b.state_weights));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&b.input_weights));
    let ric = riccati_solve(&a, &bm, &q, &r, gamma)?;
    log::info!("behavior steady state {x_ss:?} under input {:?}", b.input);
    Ok(Behavior {
        x_ss: DVector::from_column_slice(&x_ss),
        u_ss: DVector::from_column_slice(&b.input),
        k: ric.k,
    })
}

/// Discounted returns-to-go of the behavior from seeded random starts.
fn value_samples(env: &CstrConfig, sec: &CstrSection, beh: &Behavior, gamma: DiscountConfig, seed: u64) -> Result<Vec<(StateVec, f64)>> {
    let v = &sec.value;
    let per_rollout: Vec<Result<Vec<(StateVec, f64)>>> = (0..v.rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, &[0, i as u64]));
            let start: Vec<f64> = (0..N)
                .map(|j| {
                    let (lo, hi) = (v.x0_low[j], v.x0_high[j]);
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..hi)
                    }
                })
                .collect();
            let mut s = StateVec::from_slice(&start)?;
            let mut states = Vec::with_capacity(v.rollout_steps);
            let mut rewards = Vec::with_capacity(v.rollout_steps);
            for _ in 0..v.rollout_steps {
                let a = beh.action(env, &s);
                let (r, next) = cstr_step(env, &s, &a)?;
                states.push(s);
                rewards.push(r);
                s = next;
            }
            let mut ret = 0.0;
            let mut returns = vec![0.0; rewards.len()];
            for t in (0..rewards.len()).rev() {
                ret = rewards[t] + gamma.gamma() * ret;
                returns[t] = ret;
            }
            Ok(states.into_iter().zip(returns).take(v.fit_steps).collect())
        })
        .collect();
    let mut data = Vec::with_capacity(v.rollouts * v.fit_steps);
    for r in per_rollout {
        data.extend(r?);
    }
    Ok(data)
}

/// One closed-loop step of an agent, in environment coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub state: Vec<f64>,
    /// Empty on the final row.
    pub action: Option<Vec<f64>>,
    pub reward: Option<f64>,
    /// The state lies outside the operating box.
    pub violation: bool,
    pub tracking_error: f64,
    /// The MPC solve failed and the previous input was held.
    pub solver_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentReport {
    pub name: String,
    pub violations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub discounted_return: f64,
    pub solver_failures: usize,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone)]
pub struct CstrReport {
    pub outputs: RunOutputs,
    pub value_rmse: f64,
    pub value_samples: usize,
    pub value_model: ValueModel,
    pub agents: Vec<AgentReport>,
}

impl CstrReport {
    pub fn agent(&self, name: &str) -> Option<&AgentReport> {
        self.agents.iter().find(|a| a.name == name)
    }
}

struct Agent {
    name: &'static str,
    spec: OcpSpec,
}

fn closed_loop(env: &CstrConfig, sec: &CstrSection, gamma: DiscountConfig, agent: &Agent) -> Result<AgentReport> {
    let sc: &CstrScaling = &sec.scaling;
    let solver = SqpSolver::new(sec.solver);
    let err = |s: &StateVec| (s[1] - env.setpoint).abs();
    let mut s = StateVec::from_slice(&sec.initial_state)?;
    let mut warm: Option<KktPoint> = None;
    let mut rows = Vec::with_capacity(sec.steps + 1);
    let mut visited = Vec::with_capacity(sec.steps);
    let (mut ret, mut weight, mut failures) = (0.0, 1.0, 0);
    for t in 0..sec.steps {
        let xi = sc.state(&s)?;
        let (a, failed) = match solver.policy(&agent.spec, &xi, warm.as_ref()) {
            Ok((nu, kkt)) => {
                warm = Some(kkt);
                (sc.action(&nu)?, false)
            }
            Err(e) if e.is_numerical() => {
                log::warn!("{} step {t}: {e}; holding the previous input", agent.name);
                warm = None;
                failures += 1;
                (ActionVec::from_slice(&s.as_slice()[NP..])?, true)
            }
            Err(e) => return Err(e),
        };
        let (r, next) = cstr_step(env, &s, &a)?;
        rows.push(TrajectoryRow {
            step: t,
            state: s.as_slice().to_vec(),
            action: Some(a.as_slice().to_vec()),
            reward: Some(r),
            violation: !env.state_box.contains(s.as_slice(), 1e-9),
            tracking_error: err(&s),
            solver_failed: failed,
        });
        ret += weight * r;
        weight *= gamma.gamma();
        if let Some(w) = warm.as_mut() {
            *w = w.shifted(&sc.state(&next)?);
        }
        visited.push(next.clone());
        s = next;
    }
    rows.push(TrajectoryRow {
        step: sec.steps,
        state: s.as_slice().to_vec(),
        action: None,
        reward: None,
        violation: !env.state_box.contains(s.as_slice(), 1e-9),
        tracking_error: err(&s),
        solver_failed: false,
    });
    let initial = StateVec::from_slice(&sec.initial_state)?;
    Ok(AgentReport {
        name: agent.name.to_string(),
        violations: constraint_violation_count(&visited, &env.state_box),
        initial_error: err(&initial),
        final_error: err(&s),
        discounted_return: ret,
        solver_failures: failures,
        trajectory: rows,
    })
}

fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("step,c_a,c_b,t_r,t_k,f_prev,q_prev,f,q,reward,violation,tracking_error,solver_failed\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = write!(out, "{}", r.step);
        for v in &r.state {
            let _ = write!(out, ",{v}");
        }
        let (f, q) = match &r.action {
            Some(a) => (Some(a[0]), Some(a[1])),
            None => (None, None),
        };
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            opt(f),
            opt(q),
            opt(r.reward),
            u8::from(r.violation),
            r.tracking_error,
            u8::from(r.solver_failed)
        );
    }
    out
}

/// Offline Monte Carlo value fit followed by three closed loops from a
/// common start: greedy one-step maximization of the learned value without
/// state constraints, the constrained MPC with its fixed terminal cost, and
/// the constrained MPC with the learned value as terminal cost.
pub fn run_cstr_vfmpc(cfg: &ExperimentConfig) -> Result<CstrReport> {
    cfg.validate()?;
    let Some(EnvSection::Cstr(env)) = &cfg.env else {
        unreachable!("validated")
    };
    let ocp = cfg.ocp.as_ref().expect("validated");
    let sec = cfg.cstr.as_ref().expect("validated");
    let gamma = ocp.gamma;
    let start = Instant::now();

    let beh = behavior(env, sec, gamma)?;
    let data = value_samples(env, sec, &beh, gamma, cfg.seed)?;
    let fit = fit_value_function(&data, &sec.value.features)?;
    log::info!("value fit: {} samples, rmse {:e}", data.len(), fit.rmse);
    if !(fit.rmse <= sec.value.rmse_max) {
        return Err(Error::ValueFit {
            rmse: fit.rmse,
            max: sec.value.rmse_max,
        });
    }

    let value_terminal: Arc<dyn SmoothMap> = Arc::new(ValueTerminalCost {
        model: fit.model.clone(),
        input_center: DVector::from_column_slice(&sec.scaling.center),
        input_scale: DVector::from_column_slice(&sec.scaling.scale),
        n_params: 1,
    });
    let fixed_terminal: Arc<dyn SmoothMap> = Arc::new(CstrTrackingTerminal {
        weight: sec.default_terminal_weight,
        setpoint: env.setpoint,
        scaling: sec.scaling.clone(),
    });
    let build = |horizon, state_constraints, terminal: &Arc<dyn SmoothMap>| {
        build_cstr_ocp(&CstrOcpData {
            env: env.clone(),
            scaling: sec.scaling.clone(),
            horizon,
            gamma,
            cost_scale: sec.cost_scale,
            backoff: sec.backoff,
            state_constraints,
            terminal: terminal.clone(),
        })
    };
    let agents = [
        Agent {
            name: "greedy_v",
            spec: build(1, false, &value_terminal)?,
        },
        Agent {
            name: "default_mpc",
            spec: build(ocp.horizon, true, &fixed_terminal)?,
        },
        Agent {
            name: "value_mpc",
            spec: build(ocp.horizon, true, &value_terminal)?,
        },
    ];
    let reports: Vec<Result<AgentReport>> = agents.par_iter().map(|a| closed_loop(env, sec, gamma, a)).collect();
    let reports: Vec<AgentReport> = reports.into_iter().collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();

    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, a)| MetricsRow {
            run_id: i,
            episode: 0,
            j_hat: Some(a.discounted_return),
            stderr: None,
            frob_a: None,
            frob_b: None,
            td_loss: None,
            violation_count: Some(a.violations),
            wall_time: elapsed,
        })
        .collect();
    let mut extra = serde_json::Map::new();
    extra.insert("experiment".into(), json!("cstr_vfmpc"));
    extra.insert("seed".into(), json!(cfg.seed));
    extra.insert(
        "value_fit".into(),
        json!({ "samples": data.len(), "rmse": fit.rmse, "ridge": fit.ridge }),
    );
    extra.insert("behavior_steady_state".into(), json!(beh.x_ss.as_slice()));
    extra.insert("agents".into(), serde_json::to_value(&reports)?);
    let files = reports
        .iter()
        .map(|a| (format!("trajectory_{}.csv", a.name), trajectory_csv(&a.trajectory)))
        .collect();
    Ok(CstrReport {
        outputs: RunOutputs {
            rows,
            excluded_runs: Vec::new(),
            extra,
            files,
        },
        value_rmse: fit.rmse,
        value_samples: data.len(),
        value_model: fit.model,
        agents: reports,
    })
}
