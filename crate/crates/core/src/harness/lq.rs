use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::json;

use super::{frobenius_mismatch, Aggregate, EnvSection, ExperimentConfig, MetricsRow, RunOutputs};
use crate::dp::riccati_solve;
use crate::envs::{LqEnv, LqEnvConfig};
use crate::error::{Error, Result};
use crate::mdp::{derive_seed, rng_from_seed, DiscountConfig, SimRng};
use crate::ocp::{build_lq_ocp, lq_model_matrices, InputBounds, LqOcpData, OcpSpec};
use crate::rl::{gradient_step, mask_gradient, reinforce_gradient, Direction, GaussianMpcPolicy, ReinforceOptions, RunningBaseline};
use crate::solver::SqpSolver;

/// Runs whose share of abandoned episodes exceeds this are excluded.
const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct LqReport {
    pub outputs: RunOutputs,
    /// Expected return of the optimal linear feedback under each episode's
    /// exploration noise.
    pub j_star: Vec<f64>,
    /// `|mean J_hat - J*|` at the first and last episode.
    pub initial_gap: f64,
    pub final_gap: f64,
}

impl LqReport {
    pub fn gap_closed(&self) -> f64 {
        1.0 - self.final_gap / self.initial_gap
    }
}

/// Exact `E[sum_{t<steps} gamma^t r_t]` for `a = -Ks + sigma xi` on the LQ
/// environment, with `s_0` uniform on the start box.
pub fn lq_expected_return(env: &LqEnvConfig, k: &DMatrix<f64>, sigma: &DVector<f64>, steps: usize, gamma: DiscountConfig) -> f64 {
    let mean = (&env.x0_low + &env.x0_high) / 2.0;
    let width = &env.x0_high - &env.x0_low;
    let mut cov = &mean * mean.transpose() + DMatrix::from_diagonal(&width.map(|w| w * w / 12.0));
    let a_cl = &env.a - &env.b * k;
    let s_a = DMatrix::from_diagonal(&sigma.map(|s| s * s));
    let w = DMatrix::from_diagonal(&env.noise_std.map(|s| s * s));
    let state_cost = &env.q + k.transpose() * &env.r * k;
    let action_noise = (&env.r * &s_a).trace();
    let drive = &env.b * &s_a * env.b.transpose() + w;
    let mut total = 0.0;
    let mut weight = 1.0;
    for _ in 0..steps {
        total -= weight * ((&state_cost * &cov).trace() + action_noise);
        cov = &a_cl * cov * a_cl.transpose() + &drive;
        weight *= gamma.gamma();
    }
    total
}

fn unit_direction(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng));
    let norm = g.norm();
    g / norm
}

struct RunResult {
    rows: Vec<MetricsRow>,
    failed: usize,
    simulated: usize,
}

fn run_one(cfg: &ExperimentConfig, env: &LqEnv, p_terminal: &DMatrix<f64>, run: usize) -> Result<RunResult> {
    let ocp = cfg.ocp.as_ref().expect("validated");
    let learner = cfg.learner.as_ref().expect("validated");
    let pert = ocp.perturbation.expect("validated");
    let e = env.config();
    let (n, m) = (e.a.nrows(), e.b.ncols());
    let run_seed = derive_seed(cfg.seed, &[run as u64]);
    let mut rng = rng_from_seed(derive_seed(run_seed, &[0]));
    let a_phi = &e.a + unit_direction(n, n, &mut rng) * pert.frobenius_a;
    let b_phi = &e.b + unit_direction(n, m, &mut rng) * pert.frobenius_b;
    let mut spec: OcpSpec = build_lq_ocp(&LqOcpData {
        a: a_phi,
        b: b_phi,
        q: e.q.clone(),
        r: e.r.clone(),
        p_terminal: p_terminal.clone(),
        terminal_offset: 0.0,
        horizon: ocp.horizon,
        bounds: ocp.input_bounds.as_ref().map(|b| InputBounds {
            lower: b.lower.clone().into(),
            upper: b.upper.clone().into(),
        }),
        gamma: ocp.gamma,
        discount_in_horizon: ocp.discount_in_horizon,
    })?;
    let names: Vec<&str> = learner.learnable.iter().map(String::as_str).collect();
    let mask = spec.params().layout().mask(&names)?;
    let solver = SqpSolver::new(learner.solver);
    let mut baseline = RunningBaseline::new();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(learner.episodes + 1);
    let (mut failed, mut simulated) = (0, 0);

    // Row `ep` describes the parameters after `ep` updates; the last batch
    // only evaluates.
    for ep in 0..=learner.episodes {
        let (a_cur, b_cur) = lq_model_matrices(spec.params(), n, m)?;
        let policy = GaussianMpcPolicy::new(spec.clone(), learner.sigma.at(ep), solver.clone())?;
        let opts = ReinforceOptions {
            episodes: learner.batch,
            steps: learner.steps,
            gamma: learner.gamma,
            seed: derive_seed(run_seed, &[1, ep as u64]),
        };
        simulated += learner.batch;
        let est = match reinforce_gradient(env, &policy, &opts, &mut baseline) {
            Ok(est) => Some(est),
            Err(Error::AllSkipped { skipped }) => {
                failed += skipped;
                None
            }
            Err(err) if err.is_numerical() => {
                log::warn!("run {run} episode {ep}: {err}");
                failed += learner.batch;
                None
            }
            Err(err) => return Err(err),
        };
        rows.push(MetricsRow {
            run_id: run,
            episode: ep,
            j_hat: est.as_ref().map(|r| r.j_hat),
            stderr: est.as_ref().map(|r| r.stderr),
            frob_a: Some(frobenius_mismatch(&a_cur, &e.a)?),
            frob_b: Some(frobenius_mismatch(&b_cur, &e.b)?),
            td_loss: None,
            violation_count: None,
            wall_time: start.elapsed().as_secs_f64(),
        });
        let Some(est) = est else { continue };
        failed += est.failed_episodes;
        if ep < learner.episodes {
            let grad = mask_gradient(&est.grad, &mask)?;
            match gradient_step(spec.params(), &grad, learner.alpha, Direction::Ascent) {
                Ok(phi) => spec = spec.with_params(phi)?,
                Err(err) => log::warn!("run {run} episode {ep}: update skipped: {err}"),
            }
        }
    }
    Ok(RunResult { rows, failed, simulated })
}

/// REINFORCE tuning of the model inside an LQ MPC, from a seeded
/// perturbation of the true `(A, B)`, over `repetitions` independent runs.
pub fn run_lq_reinforce(cfg: &ExperimentConfig) -> Result<LqReport> {
    cfg.validate()?;
    let Some(EnvSection::Lq(env_section)) = &cfg.env else {
        unreachable!("validated")
    };
    let ocp = cfg.ocp.as_ref().expect("validated");
    let learner = cfg.learner.as_ref().expect("validated");
    let env = LqEnv::new(env_section.to_config()?)?;
    let e = env.config();
    let riccati = riccati_solve(&e.a, &e.b, &e.q, &e.r, ocp.gamma)?;

    let results: Vec<Result<RunResult>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|run| run_one(cfg, &env, &riccati.p, run))
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let mut flagged = Vec::new();
    for (run, res) in results.into_iter().enumerate() {
        let res = res?;
        let rate = res.failed as f64 / res.simulated as f64;
        if rate > MAX_FAILURE_RATE {
            log::warn!("run {run}: {:.1}% of episodes failed; excluded from aggregates", 100.0 * rate);
            excluded.push(run);
            flagged.push(json!({ "run_id": run, "failure_rate": rate }));
        }
        rows.extend(res.rows);
    }

    let j_star: Vec<f64> = (0..=learner.episodes)
        .map(|ep| lq_expected_return(e, &riccati.k, &learner.sigma.at(ep), learner.steps, learner.gamma))
        .collect();
    let mean_j = |ep: usize| {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.episode == ep && !excluded.contains(&r.run_id))
            .filter_map(|r| r.j_hat)
            .collect();
        Aggregate::of(&xs).map(|a| a.mean)
    };
    let gap = |ep: usize| mean_j(ep).map_or(f64::NAN, |j| (j - j_star[ep]).abs());
    let initial_gap = gap(0);
    let final_gap = gap(learner.episodes);

    let mut extra = serde_json::Map::new();
    extra.insert("experiment".into(), json!("lq_reinforce"));
    extra.insert("seed".into(), json!(cfg.seed));
    extra.insert("flagged_runs".into(), json!(flagged));
    extra.insert("j_star".into(), json!(j_star));
    extra.insert("initial_gap".into(), json!(initial_gap));
    extra.insert("final_gap".into(), json!(final_gap));
    extra.insert("gap_closed".into(), json!(1.0 - final_gap / initial_gap));
    if excluded.len() == cfg.repetitions {
        return Err(Error::AllSkipped { skipped: excluded.len() });
    }
    Ok(LqReport {
        outputs: RunOutputs {
            rows,
            excluded_runs: excluded,
            extra,
            files: Vec::new(),
        },
        j_star,
        initial_gap,
        final_gap,
    })
}
