use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{derive_seed, mean_and_stderr, rng_from_seed, ActionVec, DiscountConfig, Environment, StateVec};
use crate::ocp::OcpSpec;
use crate::sensitivity::jac_policy_wrt_params;
use crate::solver::{KktPoint, SqpSolver};

/// `a ~ N(mu_phi(s), diag(sigma^2))` with `mu_phi` the MPC policy.
#[derive(Debug, Clone)]
pub struct GaussianMpcPolicy {
    pub spec: OcpSpec,
    pub sigma: DVector<f64>,
    pub solver: SqpSolver,
}

impl GaussianMpcPolicy {
    pub fn new(spec: OcpSpec, sigma: DVector<f64>, solver: SqpSolver) -> Result<Self> {
        if sigma.len() != spec.action_dim() {
            return Err(Error::dim("sigma", spec.action_dim(), sigma.len()));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        Ok(Self { spec, sigma, solver })
    }

    pub fn mean(&self, s: &StateVec, warm: Option<&KktPoint>) -> Result<(ActionVec, KktPoint)> {
        self.solver.policy(&self.spec, s, warm)
    }

    pub fn log_density(&self, a: &ActionVec, mean: &ActionVec) -> f64 {
        let m = self.sigma.len() as f64;
        let quad: f64 = (0..self.sigma.len())
            .map(|i| ((a[i] - mean[i]) / self.sigma[i]).powi(2))
            .sum();
        -0.5 * quad - self.sigma.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * m * (2.0 * std::f64::consts::PI).ln()
    }

    /// `d log pi(a | s) / d phi = dmu/dphi' (a - mu) / sigma^2`.
    pub fn score(&self, a: &ActionVec, mean: &ActionVec, dmu_dphi: &DMatrix<f64>) -> DVector<f64> {
        let w = DVector::from_fn(self.sigma.len(), |i, _| (a[i] - mean[i]) / self.sigma[i].powi(2));
        dmu_dphi.transpose() * w
    }
}

/// Running mean of all returns seen in earlier batches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningBaseline {
    sum: f64,
    count: usize,
}

impl RunningBaseline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, returns: &[f64]) {
        self.sum += returns.iter().sum::<f64>();
        self.count += returns.len();
    }

    /// Baseline for each episode of a batch. Before any history exists,
    /// each episode gets the mean of the other episodes' returns (zero for
    /// a single episode) so the baseline never depends on its own return.
    pub fn for_batch(&self, returns: &[f64]) -> Vec<f64> {
        match self.mean() {
            Some(b) => vec![b; returns.len()],
            None if returns.len() < 2 => vec![0.0; returns.len()],
            None => {
                let total: f64 = returns.iter().sum();
                let k = (returns.len() - 1) as f64;
                returns.iter().map(|g| (total - g) / k).collect()
            }
        }
    }
}

/// `mean_i (G_i - b_i) score_i`.
pub fn reinforce_from_scores(returns: &[f64], baselines: &[f64], scores: &[DVector<f64>]) -> Result<DVector<f64>> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("no episodes".into()));
    }
    if baselines.len() != returns.len() || scores.len() != returns.len() {
        return Err(Error::dim("episode scores", returns.len(), scores.len().min(baselines.len())));
    }
    let p = scores[0].len();
    let mut grad = DVector::zeros(p);
    for ((g, b), sc) in returns.iter().zip(baselines).zip(scores) {
        if sc.len() != p {
            return Err(Error::dim("score", p, sc.len()));
        }
        grad += sc * (g - b);
    }
    Ok(grad / returns.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceOptions {
    pub episodes: usize,
    pub steps: usize,
    pub gamma: DiscountConfig,
    /// Episode `i` is seeded with `derive_seed(seed, [i])`.
    pub seed: u64,
}

/// One simulated episode: discounted return and summed score.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScore {
    pub ret: f64,
    pub score: DVector<f64>,
    /// Timesteps whose score was dropped for a degenerate sensitivity.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceResult {
    pub grad: DVector<f64>,
    /// Mean discounted return of the completed episodes.
    pub j_hat: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
    pub dropped_steps: usize,
    /// Episodes abandoned after a failed MPC solve.
    pub failed_episodes: usize,
}

fn run_episode<E: Environment + ?Sized>(
    env: &E,
    policy: &GaussianMpcPolicy,
    steps: usize,
    gamma: DiscountConfig,
    seed: u64,
) -> Result<EpisodeScore> {
    let mut rng = rng_from_seed(seed);
    let mut s = env.reset(&mut rng);
    let mut warm: Option<KktPoint> = None;
    let mut score = DVector::zeros(policy.spec.params().len());
    let mut ret = 0.0;
    let mut weight = 1.0;
    let mut dropped = 0;
    for t in 0..steps {
        let (mu, kkt) = policy.mean(&s, warm.as_ref())?;
        let a = ActionVec::new(DVector::from_fn(mu.len(), |i, _| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            mu[i] + policy.sigma[i] * xi
        }))?;
        match jac_policy_wrt_params(&policy.spec, &kkt) {
            Ok(sens) if sens.is_strict() => {
                score += policy.score(&a, &mu, sens.jacobian().expect("policy jacobian"));
            }
            Ok(sens) => {
                log::debug!("step {t}: degenerate sensitivity dropped ({})", sens.notes.join("; "));
                dropped += 1;
            }
            Err(e) if e.is_numerical() => {
                log::debug!("step {t}: sensitivity failed, dropped: {e}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
        let (r, next) = env.step(&s, &a, &mut rng)?;
        if !r.is_finite() {
            return Err(Error::Divergence { step: t });
        }
        ret += weight * r;
        weight *= gamma.gamma();
        warm = Some(kkt.shifted(&next));
        s = next;
    }
    Ok(EpisodeScore { ret, score, dropped })
}

/// Simulate `opts.episodes` independent episodes in parallel; results are
/// in episode order. Episodes that hit a numerical failure are dropped and
/// counted.
pub fn simulate_episodes<E: Environment + ?Sized>(
    env: &E,
    policy: &GaussianMpcPolicy,
    opts: &ReinforceOptions,
) -> Result<(Vec<EpisodeScore>, usize)> {
    if opts.episodes == 0 {
        return Err(Error::InvalidArgument("reinforce needs at least one episode".into()));
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("reinforce needs at least one step".into()));
    }
    let results: Vec<Result<EpisodeScore>> = (0..opts.episodes)
        .into_par_iter()
        .map(|i| run_episode(env, policy, opts.steps, opts.gamma, derive_seed(opts.seed, &[i as u64])))
        .collect();
    let mut episodes = Vec::with_capacity(opts.episodes);
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(ep) => episodes.push(ep),
            Err(e) if e.is_numerical() => {
                log::debug!("episode {i} abandoned: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((episodes, failed))
}

/// Monte Carlo REINFORCE estimate `mean_i (G_i - b_i) sum_t score_t`. The
/// baseline is read before and updated after the batch.
pub fn reinforce_gradient<E: Environment + ?Sized>(
    env: &E,
    policy: &GaussianMpcPolicy,
    opts: &ReinforceOptions,
    baseline: &mut RunningBaseline,
) -> Result<ReinforceResult> {
    let (episodes, failed) = simulate_episodes(env, policy, opts)?;
    if episodes.is_empty() {
        return Err(Error::AllSkipped { skipped: failed });
    }
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let scores: Vec<DVector<f64>> = episodes.iter().map(|e| e.score.clone()).collect();
    let baselines = baseline.for_batch(&returns);
    let grad = reinforce_from_scores(&returns, &baselines, &scores)?;
    baseline.update(&returns);
    let (j_hat, stderr) = mean_and_stderr(&returns);
    Ok(ReinforceResult {
        grad,
        j_hat,
        stderr,
        dropped_steps: episodes.iter().map(|e| e.dropped).sum(),
        returns,
        failed_episodes: failed,
    })
}
