use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RunOutputs;
use crate::dp::{
    bellman_backup, bellman_residual, evaluate_policy, greedy_policy_tabular, lq_optimal_q, policy_q, riccati_solve, value_iteration,
    RiccatiSolution, TabularQ,
};
use crate::error::{Error, Result};
use crate::mdp::{derive_seed, rng_from_seed, ActionVec, DiscountConfig, SimRng, StateVec, TabularMdp, Transition};
use crate::ocp::{build_lq_ocp, InputBounds, LqOcpData, OcpSpec};
use crate::rl::{td_loss_and_grad, TdOptions};
use crate::sensitivity::{finite_diff_check, jac_policy_wrt_params, FdOptions};
use crate::solver::{mpc_policy, mpc_qvalue};

/// Sizes of the oracle property suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    pub seed: u64,
    pub mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub q_pairs: usize,
    pub lq_samples: usize,
    pub lq_horizon: usize,
    pub sensitivity_instances: usize,
    pub td_batches: usize,
    pub td_batch_size: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            mdps: 50,
            max_states: 20,
            max_actions: 5,
            q_pairs: 100,
            lq_samples: 100,
            lq_horizon: 20,
            sensitivity_instances: 6,
            td_batches: 4,
            td_batch_size: 64,
        }
    }
}

pub const VALUE_ITERATION_TOL: f64 = 1e-8;
pub const IMPROVEMENT_TOL: f64 = 1e-9;
pub const RICCATI_MPC_TOL: f64 = 1e-6;
pub const SENSITIVITY_TOL: f64 = 1e-4;
pub const TD_FIXED_POINT_TOL: f64 = 1e-10;
/// Roundoff allowance for sensitivities that vanish identically.
pub const FROZEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BellmanReport {
    pub mdps: usize,
    pub max_residual: f64,
    /// Largest `|TQ1 - TQ2| - gamma |Q1 - Q2|` over all pairs; nonpositive
    /// when the contraction holds.
    pub max_contraction_excess: f64,
    /// Largest `v_pi(s) - v_greedy(s)` over all states.
    pub max_improvement_deficit: f64,
}

impl BellmanReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= VALUE_ITERATION_TOL && self.max_contraction_excess <= 1e-12 && self.max_improvement_deficit <= IMPROVEMENT_TOL
    }
}

/// Value iteration, contraction and policy improvement on random tabular
/// MDPs.
pub fn bellman_suite(settings: &OracleSettings) -> Result<BellmanReport> {
    let per_mdp: Vec<Result<(f64, f64, f64)>> = (0..settings.mdps)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(settings.seed, &[1, i as u64]));
            let ns = rng.random_range(1..=settings.max_states);
            let na = rng.random_range(1..=settings.max_actions);
            let gamma = DiscountConfig::new(rng.random_range(0.5..0.95))?;
            let mdp = TabularMdp::random(ns, na, gamma, &mut rng);
            let vi = value_iteration(&mdp, VALUE_ITERATION_TOL)?;
            let residual = bellman_residual(&vi.q, &mdp)?;

            let mut excess = f64::NEG_INFINITY;
            for _ in 0..settings.q_pairs {
                let scale = rng.random_range(0.1..10.0);
                let q1 = TabularQ(DMatrix::from_fn(ns, na, |_, _| scale * rng.random_range(-1.0..1.0)));
                let q2 = TabularQ(DMatrix::from_fn(ns, na, |_, _| scale * rng.random_range(-1.0..1.0)));
                let lhs = bellman_backup(&q1, &mdp)?.sup_distance(&bellman_backup(&q2, &mdp)?);
                excess = excess.max(lhs - gamma.gamma() * q1.sup_distance(&q2));
            }

            let pi: Vec<usize> = (0..ns).map(|_| rng.random_range(0..na)).collect();
            let improved = greedy_policy_tabular(&policy_q(&mdp, &pi)?);
            let v_pi = evaluate_policy(&mdp, &pi)?;
            let v_new = evaluate_policy(&mdp, &improved)?;
            let deficit = (&v_pi - &v_new).max();
            Ok((residual, excess, deficit))
        })
        .collect();
    let mut report = BellmanReport {
        mdps: settings.mdps,
        max_residual: 0.0,
        max_contraction_excess: f64::NEG_INFINITY,
        max_improvement_deficit: f64::NEG_INFINITY,
    };
    for r in per_mdp {
        let (res, exc, def) = r?;
        report.max_residual = report.max_residual.max(res);
        report.max_contraction_excess = report.max_contraction_excess.max(exc);
        report.max_improvement_deficit = report.max_improvement_deficit.max(def);
    }
    Ok(report)
}

/// A random stabilizable two-state, one-input LQ problem.
pub(crate) struct RandomLq {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: DiscountConfig,
    pub riccati: RiccatiSolution,
}

pub(crate) fn random_lq(rng: &mut SimRng) -> Result<RandomLq> {
    let gamma = DiscountConfig::new(0.9)?;
    for _ in 0..100 {
        let a = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.8 } else { 0.0 } + rng.random_range(-0.25..0.25));
        let b = DMatrix::from_fn(2, 1, |_, _| rng.random_range(0.4..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = &l * l.transpose() + DMatrix::identity(2, 2) * 0.1;
        let r = DMatrix::from_element(1, 1, rng.random_range(0.1..1.0));
        if let Ok(riccati) = riccati_solve(&a, &b, &q, &r, gamma) {
            return Ok(RandomLq { a, b, q, r, gamma, riccati });
        }
    }
    Err(Error::InvalidArgument("no stabilizable random LQ problem drawn".into()))
}

impl RandomLq {
    pub fn spec(&self, horizon: usize, bounds: Option<(f64, f64)>) -> Result<OcpSpec> {
        build_lq_ocp(&LqOcpData {
            a: self.a.clone(),
            b: self.b.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            p_terminal: self.riccati.p.clone(),
            terminal_offset: 0.0,
            horizon,
            bounds: bounds.map(|(lo, hi)| InputBounds {
                lower: DVector::from_element(1, lo),
                upper: DVector::from_element(1, hi),
            }),
            gamma: self.gamma,
            discount_in_horizon: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiMpcReport {
    pub samples: usize,
    pub max_q_error: f64,
    pub max_policy_error: f64,
}

impl RiccatiMpcReport {
    pub fn passed(&self) -> bool {
        self.max_q_error <= RICCATI_MPC_TOL && self.max_policy_error <= RICCATI_MPC_TOL
    }
}

/// MPC with the Riccati terminal cost reproduces the exact LQ Q-function
/// and gain.
pub fn riccati_mpc_suite(settings: &OracleSettings) -> Result<RiccatiMpcReport> {
    let mut rng = rng_from_seed(derive_seed(settings.seed, &[2]));
    let lq = random_lq(&mut rng)?;
    let spec = lq.spec(settings.lq_horizon, None)?;
    let samples: Vec<(DVector<f64>, DVector<f64>)> = (0..settings.lq_samples)
        .map(|_| {
            (
                DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0)),
            )
        })
        .collect();
    let errors: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|(s, a)| {
            let q_mpc = mpc_qvalue(&spec, &StateVec::new(s.clone())?, &ActionVec::new(a.clone())?, None)?;
            let q_exact = lq_optimal_q(&lq.riccati, &lq.a, &lq.b, &lq.q, &lq.r, s, a);
            let (u, _) = mpc_policy(&spec, &StateVec::new(s.clone())?, None)?;
            let pol = (u.as_vector() + &lq.riccati.k * s).norm();
            Ok(((q_mpc - q_exact).abs(), pol))
        })
        .collect();
    let mut report = RiccatiMpcReport {
        samples: settings.lq_samples,
        max_q_error: 0.0,
        max_policy_error: 0.0,
    };
    for e in errors {
        let (q, p) = e?;
        report.max_q_error = report.max_q_error.max(q);
        report.max_policy_error = report.max_policy_error.max(p);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub instances: usize,
    pub max_value_deviation: f64,
    pub max_policy_deviation: f64,
    /// Instances whose first input sits strictly on a bound.
    pub active_bound_instances: usize,
    /// Largest cost-parameter entry of the policy Jacobian at those
    /// instances; zero up to roundoff when the bound freezes the action.
    pub max_active_cost_sensitivity: f64,
    pub failed_solves: usize,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.max_value_deviation <= SENSITIVITY_TOL
            && self.max_policy_deviation <= SENSITIVITY_TOL
            && self.active_bound_instances > 0
            && self.max_active_cost_sensitivity <= FROZEN_TOL
            && self.failed_solves == 0
    }
}

/// Analytic value gradients and policy Jacobians against central
/// differences, on unconstrained instances and on instances whose first
/// input is pushed onto a bound.
pub fn sensitivity_suite(settings: &OracleSettings) -> Result<SensitivityReport> {
    let opts = FdOptions::default();
    let per: Vec<Result<(f64, f64, Option<f64>, usize)>> = (0..settings.sensitivity_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(settings.seed, &[3, i as u64]));
            let lq = random_lq(&mut rng)?;
            let horizon = rng.random_range(2..8);
            let s = StateVec::new(DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)))?;
            let active = i % 2 == 1;
            let (spec, a) = if active {
                // Halve the unconstrained first input and make that the bound.
                let free = lq.spec(horizon, None)?;
                let (u, _) = mpc_policy(&free, &s, None)?;
                let lim = 0.5 * u[0].abs().max(1e-2);
                (lq.spec(horizon, Some((-lim, lim)))?, rng.random_range(-0.9..0.9) * lim)
            } else {
                (lq.spec(horizon, None)?, rng.random_range(-2.0..2.0))
            };
            let a = ActionVec::from_slice(&[a])?;
            let all: Vec<usize> = (0..spec.params().len()).collect();
            let (u, kkt) = mpc_policy(&spec, &s, None)?;
            // A later input may saturate first; only a saturated u_0 counts.
            let active = active && spec.params().segment("u_hi")?[0] - u[0].abs() <= 1e-9;
            let q = finite_diff_check(&spec, &s, Some(&a), &all, &opts)?;
            let pi = finite_diff_check(&spec, &s, None, &all, &opts)?;
            let frozen = if active {
                let jac = jac_policy_wrt_params(&spec, &kkt)?;
                let jac = jac.jacobian().expect("policy jacobian");
                let layout = spec.params().layout();
                let mut worst = 0.0_f64;
                for name in ["Q", "R", "P", "c"] {
                    let seg = layout.segment(name).expect("lq segment");
                    for k in seg.offset..seg.offset + seg.len {
                        worst = worst.max(jac[(0, k)].abs());
                    }
                }
                Some(worst)
            } else {
                None
            };
            Ok((
                q.max_relative_deviation,
                pi.max_relative_deviation,
                frozen,
                q.failed.len() + pi.failed.len(),
            ))
        })
        .collect();
    let mut report = SensitivityReport {
        instances: settings.sensitivity_instances,
        max_value_deviation: 0.0,
        max_policy_deviation: 0.0,
        active_bound_instances: 0,
        max_active_cost_sensitivity: 0.0,
        failed_solves: 0,
    };
    for r in per {
        let (q, p, frozen, failed) = r?;
        report.max_value_deviation = report.max_value_deviation.max(q);
        report.max_policy_deviation = report.max_policy_deviation.max(p);
        if let Some(f) = frozen {
            report.active_bound_instances += 1;
            report.max_active_cost_sensitivity = report.max_active_cost_sensitivity.max(f);
        }
        report.failed_solves += failed;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TdFixedPointReport {
    pub batches: usize,
    pub batch_size: usize,
    pub max_loss: f64,
}

impl TdFixedPointReport {
    pub fn passed(&self) -> bool {
        self.max_loss <= TD_FIXED_POINT_TOL
    }
}

/// TD loss of the Riccati-exact MPC on transitions of the deterministic LQ
/// system.
pub fn td_fixed_point_suite(settings: &OracleSettings) -> Result<TdFixedPointReport> {
    let mut rng = rng_from_seed(derive_seed(settings.seed, &[4]));
    let lq = random_lq(&mut rng)?;
    let spec = lq.spec(settings.lq_horizon.min(10), None)?;
    let mut max_loss = 0.0_f64;
    for _ in 0..settings.td_batches {
        let batch: Vec<Transition> = (0..settings.td_batch_size)
            .map(|_| {
                let s = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                let a = DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0));
                let r = -((s.transpose() * &lq.q * &s)[0] + (a.transpose() * &lq.r * &a)[0]);
                let next = &lq.a * &s + &lq.b * &a;
                Ok(Transition {
                    s: StateVec::new(s)?,
                    a: ActionVec::new(a)?,
                    r,
                    s_next: StateVec::new(next)?,
                })
            })
            .collect::<Result<_>>()?;
        let res = td_loss_and_grad(&spec, &batch, lq.gamma, &TdOptions::default())?;
        if res.skipped > 0 {
            return Err(Error::AllSkipped { skipped: res.skipped });
        }
        max_loss = max_loss.max(res.loss);
    }
    Ok(TdFixedPointReport {
        batches: settings.td_batches,
        batch_size: settings.td_batch_size,
        max_loss,
    })
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub bellman: BellmanReport,
    pub riccati_mpc: RiccatiMpcReport,
    pub sensitivity: SensitivityReport,
    pub td: TdFixedPointReport,
    pub outputs: RunOutputs,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.bellman.passed() && self.riccati_mpc.passed() && self.sensitivity.passed() && self.td.passed()
    }
}

/// All oracle suites. A failed property is reported, not raised.
pub fn run_oracle_suite(settings: &OracleSettings) -> Result<OracleReport> {
    let bellman = bellman_suite(settings)?;
    let riccati_mpc = riccati_mpc_suite(settings)?;
    let sensitivity = sensitivity_suite(settings)?;
    let td = td_fixed_point_suite(settings)?;
    let mut extra = serde_json::Map::new();
    extra.insert("experiment".into(), json!("oracle_suite"));
    extra.insert("seed".into(), json!(settings.seed));
    extra.insert("settings".into(), serde_json::to_value(settings)?);
    extra.insert("bellman".into(), json!({ "passed": bellman.passed(), "report": bellman }));
    extra.insert("riccati_mpc".into(), json!({ "passed": riccati_mpc.passed(), "report": riccati_mpc }));
    extra.insert("sensitivity".into(), json!({ "passed": sensitivity.passed(), "report": sensitivity }));
    extra.insert("td_fixed_point".into(), json!({ "passed": td.passed(), "report": td }));
    Ok(OracleReport {
        bellman,
        riccati_mpc,
        sensitivity,
        td,
        outputs: RunOutputs {
            extra,
            ..RunOutputs::default()
        },
    })
}
