use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use super::fixtures::{double_integrator, scalar, LqFixture};
use super::*;
use crate::mdp::{rng_from_seed, ActionVec, Environment, StateVec};
use crate::ocp::{check_map, OcpSpec, SmoothMap};
use crate::solver::{mpc_policy, SqpSolver};

fn transitions(fx: &LqFixture, count: usize, seed: u64) -> Vec<Transition> {
    let mut rng = rng_from_seed(seed);
    let n = fx.env.state_dim();
    let m = fx.env.action_dim();
    (0..count)
        .map(|_| {
            let s = StateVec::new(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).unwrap();
            let a = ActionVec::new(DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))).unwrap();
            let (r, s_next) = fx.env.step(&s, &a, &mut rng).unwrap();
            Transition { s, a, r, s_next }
        })
        .collect()
}

fn learner(alpha: f64, learnable: &[&str]) -> LearnerConfig {
    LearnerConfig {
        alpha,
        gamma: DiscountConfig::new(0.9).unwrap(),
        batch: 16,
        episodes: 1,
        steps: 1,
        seed: 0,
        sigma: SigmaSchedule {
            initial: vec![0.1],
            decay: 1.0,
            min: 0.0,
        },
        perturbation_scale: 0.0,
        learnable: learnable.iter().map(|s| s.to_string()).collect(),
        full_gradient: false,
        solver: Default::default(),
    }
}

#[test]
fn gradient_step_arithmetic() {
    let fx = scalar(1, 0.9, None);
    let phi = fx.spec.params().clone();
    let g = DVector::from_element(phi.len(), 1.0);
    assert_eq!(gradient_step(&phi, &g, 0.0, Direction::Ascent).unwrap(), phi);
    let up = gradient_step(&phi, &g, 0.1, Direction::Ascent).unwrap();
    assert!((up.values() - phi.values()).iter().all(|d| (d - 0.1).abs() < 1e-15));
    let down = gradient_step(&phi, &g, 0.1, Direction::Descent).unwrap();
    assert!((down.values() - phi.values()).iter().all(|d| (d + 0.1).abs() < 1e-15));
    let half = gradient_step(&phi, &g, 0.05, Direction::Ascent).unwrap();
    let twice = gradient_step(&half, &g, 0.05, Direction::Ascent).unwrap();
    assert!((twice.values() - up.values()).amax() < 1e-15);
    let mut bad = g.clone();
    bad[0] = f64::NAN;
    assert!(matches!(gradient_step(&phi, &bad, 0.1, Direction::Ascent), Err(Error::NonFinite(_))));
    assert!(gradient_step(&phi, &DVector::zeros(1), 0.1, Direction::Ascent).is_err());
}

#[test]
fn sigma_schedule_decays_to_its_floor() {
    let s = SigmaSchedule {
        initial: vec![1.0, 2.0],
        decay: 0.5,
        min: 0.3,
    };
    assert_eq!(s.at(0).as_slice(), &[1.0, 2.0]);
    assert_eq!(s.at(1).as_slice(), &[0.5, 1.0]);
    assert_eq!(s.at(3).as_slice(), &[0.3, 0.3]);
}

#[test]
fn learner_config_rejects_bad_values() {
    assert!(learner(0.1, &["P"]).validate().is_ok());
    assert!(learner(0.0, &["P"]).validate().is_err());
    let mut c = learner(0.1, &["P"]);
    c.batch = 0;
    assert!(c.validate().is_err());
    let mut c = learner(0.1, &["P"]);
    c.sigma.initial = vec![0.0];
    assert!(c.validate().is_err());
    let text = "alpha = 0.1\ngamma = 0.9\nbatch = 1\nepisodes = 1\nsteps = 1\nseed = 0\nlearnable = []\nsigma = { initial = [1.0] }\nbogus = 1\n";
    assert!(toml::from_str::<LearnerConfig>(text).is_err());
}

#[test]
fn replay_buffer_is_a_bounded_fifo() {
    let fx = scalar(1, 0.9, None);
    let data = transitions(&fx, 10, 1);
    let mut buf = ReplayBuffer::new(4).unwrap();
    assert!(buf.sample(1, &mut rng_from_seed(0)).is_err());
    buf.extend(data.iter().cloned());
    assert_eq!(buf.len(), 4);
    let kept: Vec<&Transition> = buf.iter().collect();
    assert_eq!(kept[0], &data[6]);
    assert_eq!(kept[3], &data[9]);
    let a = buf.sample(8, &mut rng_from_seed(5)).unwrap();
    let b = buf.sample(8, &mut rng_from_seed(5)).unwrap();
    assert_eq!(a, b);
    assert!(ReplayBuffer::new(0).is_err());
}

#[test]
fn replay_sampling_is_uniform() {
    let fx = scalar(1, 0.9, None);
    let mut buf = ReplayBuffer::new(5).unwrap();
    buf.extend(transitions(&fx, 5, 2));
    let draws = 20_000;
    let sample = buf.sample(draws, &mut rng_from_seed(9)).unwrap();
    for t in buf.iter() {
        let k = sample.iter().filter(|x| *x == t).count() as f64 / draws as f64;
        // Binomial std is about 0.0028.
        assert!((k - 0.2).abs() < 0.012, "{k}");
    }
}

#[test]
fn td_error_hand_batch() {
    // Q = -3, r = -1, gamma = 0.5, max Q' = -2: target -2, loss 1.
    let d = td_error(-3.0, -1.0, 0.5, -2.0);
    assert_eq!(d, -1.0);
    assert_eq!(d * d, 1.0);
}

#[test]
fn riccati_parameterization_is_a_td_fixed_point() {
    for horizon in [1, 3, 6] {
        let fx = double_integrator(horizon, 0.9);
        let batch = transitions(&fx, 32, 3);
        let td = td_loss_and_grad(&fx.spec, &batch, fx.gamma, &TdOptions::default()).unwrap();
        assert!(td.loss <= 1e-10, "H = {horizon}: {}", td.loss);
        assert_eq!((td.used, td.skipped), (32, 0));
        assert!(td.grad.amax() < 1e-5);
    }
}

fn detuned(fx: &LqFixture, p_factor: f64) -> OcpSpec {
    let mut phi = fx.spec.params().clone();
    let p: Vec<f64> = phi.segment("P").unwrap().iter().map(|v| v * p_factor).collect();
    phi.set_segment("P", &p).unwrap();
    let a: Vec<f64> = phi.segment("A").unwrap().iter().map(|v| v * 0.97).collect();
    phi.set_segment("A", &a).unwrap();
    fx.spec.with_params(phi).unwrap()
}

#[test]
fn duplicated_batch_leaves_the_loss_unchanged() {
    let fx = double_integrator(2, 0.9);
    let spec = detuned(&fx, 0.5);
    let batch = transitions(&fx, 8, 4);
    let doubled: Vec<Transition> = batch.iter().chain(batch.iter()).cloned().collect();
    let one = td_loss_and_grad(&spec, &batch, fx.gamma, &TdOptions::default()).unwrap();
    let two = td_loss_and_grad(&spec, &doubled, fx.gamma, &TdOptions::default()).unwrap();
    assert!(one.loss > 1e-4);
    assert!((one.loss - two.loss).abs() <= 1e-12 * one.loss);
    assert!((&one.grad - &two.grad).amax() <= 1e-12 * one.grad.amax());
}

#[test]
fn td_gradients_match_finite_differences() {
    let fx = double_integrator(2, 0.9);
    let spec = detuned(&fx, 0.5);
    let batch = transitions(&fx, 6, 5);
    let g = fx.gamma.gamma();
    let solver = SqpSolver::default();
    let q = |sp: &OcpSpec, t: &Transition| -solver.qvalue(sp, &t.s, &t.a, None).unwrap().0;
    let v = |sp: &OcpSpec, s: &StateVec| -solver.policy(sp, s, None).unwrap().1.objective;
    // Targets frozen at the base parameters for the semi-gradient.
    let targets: Vec<f64> = batch.iter().map(|t| t.r + g * v(&spec, &t.s_next)).collect();
    let semi_loss = |sp: &OcpSpec| {
        batch.iter().zip(&targets).map(|(t, y)| (q(sp, t) - y).powi(2)).sum::<f64>() / batch.len() as f64
    };
    let full_loss = |sp: &OcpSpec| {
        batch
            .iter()
            .map(|t| (q(sp, t) - t.r - g * v(sp, &t.s_next)).powi(2))
            .sum::<f64>()
            / batch.len() as f64
    };
    let semi = td_loss_and_grad(&spec, &batch, fx.gamma, &TdOptions::default()).unwrap();
    let full = td_loss_and_grad(
        &spec,
        &batch,
        fx.gamma,
        &TdOptions {
            full_gradient: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((semi.loss - full_loss(&spec)).abs() < 1e-10);
    let phi = spec.params().values().clone();
    for i in 0..phi.len() {
        let h = 1e-6 * (1.0 + phi[i].abs());
        let mut pp = phi.clone();
        pp[i] += h;
        let mut pm = phi.clone();
        pm[i] -= h;
        let sp = spec.with_param_values(pp).unwrap();
        let sm = spec.with_param_values(pm).unwrap();
        let fd_semi = (semi_loss(&sp) - semi_loss(&sm)) / (2.0 * h);
        let fd_full = (full_loss(&sp) - full_loss(&sm)) / (2.0 * h);
        assert!((fd_semi - semi.grad[i]).abs() <= 1e-5 * (1.0 + fd_semi.abs()), "semi {i}: {fd_semi} vs {}", semi.grad[i]);
        assert!((fd_full - full.grad[i]).abs() <= 1e-5 * (1.0 + fd_full.abs()), "full {i}: {fd_full} vs {}", full.grad[i]);
    }
}

#[test]
fn td_rejects_mismatched_transitions() {
    let fx = scalar(1, 0.9, None);
    let bad = Transition {
        s: StateVec::zeros(2),
        a: ActionVec::zeros(1),
        r: 0.0,
        s_next: StateVec::zeros(2),
    };
    assert!(matches!(
        td_loss_and_grad(&fx.spec, &[bad], fx.gamma, &TdOptions::default()),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn infeasible_samples_are_skipped_and_counted() {
    let fx = scalar(1, 0.9, Some((-1.0, 1.0)));
    let mut batch = transitions(&fx, 3, 6);
    // An action outside the bounds makes the pinned problem infeasible.
    batch[1].a = ActionVec::from_slice(&[5.0]).unwrap();
    let td = td_loss_and_grad(&fx.spec, &batch, fx.gamma, &TdOptions::default()).unwrap();
    assert_eq!((td.used, td.skipped), (2, 1));
    for t in batch.iter_mut() {
        t.a = ActionVec::from_slice(&[5.0]).unwrap();
    }
    assert!(matches!(
        td_loss_and_grad(&fx.spec, &batch, fx.gamma, &TdOptions::default()),
        Err(Error::AllSkipped { skipped: 3 })
    ));
}

#[test]
fn q_learning_fixed_point_and_zero_step() {
    let fx = scalar(1, 0.9, None);
    let mut buf = ReplayBuffer::new(64).unwrap();
    buf.extend(transitions(&fx, 64, 7));
    let mut rng = rng_from_seed(1);
    let at_fixed_point = q_learning_update(&fx.spec, &buf, &learner(0.5, &["P"]), &mut rng).unwrap();
    assert!((at_fixed_point.spec.params().values() - fx.spec.params().values()).amax() < 1e-9);
    let spec = detuned(&fx, 0.3);
    let mut cfg = learner(0.5, &["P"]);
    cfg.alpha = f64::MIN_POSITIVE;
    let frozen = q_learning_update(&spec, &buf, &cfg, &mut rng).unwrap();
    assert!((frozen.spec.params().values() - spec.params().values()).amax() < 1e-200);
    assert!(frozen.loss > 0.0);
}

#[test]
fn q_learning_recovers_the_terminal_weight() {
    let fx = scalar(1, 0.9, None);
    let p_star = fx.riccati.p[(0, 0)];
    let mut phi = fx.spec.params().clone();
    phi.set_segment("P", &[0.3 * p_star]).unwrap();
    let mut spec = fx.spec.with_params(phi).unwrap();
    let mut buf = ReplayBuffer::new(200).unwrap();
    buf.extend(transitions(&fx, 200, 8));
    let cfg = learner(0.5, &["P"]);
    let mut rng = rng_from_seed(cfg.seed);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let up = q_learning_update(&spec, &buf, &cfg, &mut rng).unwrap();
        losses.push(up.loss);
        spec = up.spec;
    }
    let final_loss = td_loss_and_grad(&spec, &buf.iter().cloned().collect::<Vec<_>>(), fx.gamma, &TdOptions::default())
        .unwrap()
        .loss;
    let first = losses[0];
    assert!(final_loss <= 0.1 * first, "{first} -> {final_loss}");
    let p = spec.params().segment("P").unwrap()[0];
    assert!((p - p_star).abs() < 0.05 * p_star, "{p} vs {p_star}");
    // Only P moved.
    for name in ["A", "B", "Q", "R"] {
        assert_eq!(spec.params().segment(name).unwrap(), fx.spec.params().segment(name).unwrap());
    }
}

fn policy(fx: &LqFixture, sigma: f64) -> GaussianMpcPolicy {
    GaussianMpcPolicy::new(fx.spec.clone(), DVector::from_element(1, sigma), SqpSolver::default()).unwrap()
}

#[test]
fn score_function_arithmetic() {
    let fx = scalar(1, 0.9, None);
    let pol = policy(&fx, 1.0);
    let mu = ActionVec::from_slice(&[0.25]).unwrap();
    let a = ActionVec::from_slice(&[0.75]).unwrap();
    let dmu = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let score = pol.score(&a, &mu, &dmu);
    let grad = reinforce_from_scores(&[3.0], &[1.0], &[score]).unwrap();
    assert_eq!(grad.as_slice(), &[1.0, 0.0]);
    assert_eq!(pol.score(&mu, &mu, &dmu).as_slice(), &[0.0, 0.0]);
    let lp = pol.log_density(&a, &mu);
    assert!((lp - (-0.125 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
    assert!(GaussianMpcPolicy::new(fx.spec.clone(), DVector::from_element(1, 0.0), SqpSolver::default()).is_err());
}

#[test]
fn baseline_is_leave_one_out_then_running() {
    let mut b = RunningBaseline::new();
    assert_eq!(b.for_batch(&[5.0]), vec![0.0]);
    assert_eq!(b.for_batch(&[1.0, 2.0, 3.0]), vec![2.5, 2.0, 1.5]);
    b.update(&[1.0, 2.0, 3.0]);
    assert_eq!(b.for_batch(&[10.0, 0.0]), vec![2.0, 2.0]);
    assert_eq!(b.count(), 3);
}

/// Rewards shifted by a constant.
struct Offset<'a> {
    inner: &'a crate::envs::LqEnv,
    offset: f64,
}

impl Environment for Offset<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
    fn reset(&self, rng: &mut crate::mdp::SimRng) -> StateVec {
        self.inner.reset(rng)
    }
    fn step(&self, s: &StateVec, a: &ActionVec, rng: &mut crate::mdp::SimRng) -> crate::error::Result<(f64, StateVec)> {
        self.inner.step(s, a, rng).map(|(r, s2)| (r + self.offset, s2))
    }
}

fn opts(episodes: usize, seed: u64) -> ReinforceOptions {
    ReinforceOptions {
        episodes,
        steps: 4,
        gamma: DiscountConfig::new(0.9).unwrap(),
        seed,
    }
}

fn component_stderr(scores: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let p = scores[0].len();
    DVector::from_fn(p, |i, _| {
        let xs: Vec<f64> = scores.iter().zip(weights).map(|(s, w)| s[i] * w).collect();
        crate::mdp::mean_and_stderr(&xs).1
    })
}

#[test]
fn actions_at_the_mean_give_zero_gradient() {
    // With a tiny sigma the sampled actions sit at the mean up to 1e-12;
    // the score scales as (a - mu) / sigma^2 = xi / sigma, so check the
    // exact zero through the score function itself.
    let fx = scalar(2, 0.9, None);
    let pol = policy(&fx, 0.3);
    let s = StateVec::from_slice(&[0.5]).unwrap();
    let (mu, kkt) = pol.mean(&s, None).unwrap();
    let jac = crate::sensitivity::jac_policy_wrt_params(&fx.spec, &kkt).unwrap();
    let score = pol.score(&mu, &mu, jac.jacobian().unwrap());
    let grad = reinforce_from_scores(&[1.0, 2.0], &[0.0, 0.0], &[score.clone(), score]).unwrap();
    assert_eq!(grad.amax(), 0.0);
}

#[test]
fn score_function_has_zero_mean() {
    let fx = scalar(2, 0.9, None);
    let pol = policy(&fx, 0.3);
    let (eps, failed) = simulate_episodes(&fx.env, &pol, &opts(1500, 21)).unwrap();
    assert_eq!(failed, 0);
    let scores: Vec<DVector<f64>> = eps.iter().map(|e| e.score.clone()).collect();
    let ones = vec![1.0; scores.len()];
    let grad = reinforce_from_scores(&ones, &vec![0.0; ones.len()], &scores).unwrap();
    let se = component_stderr(&scores, &ones);
    for i in 0..grad.len() {
        assert!(grad[i].abs() <= 3.0 * se[i] + 1e-12, "{i}: {} vs {}", grad[i], se[i]);
    }
    // The score is nonzero in the parameters that move the mean.
    assert!(scores.iter().any(|s| s.amax() > 0.0));
}

#[test]
fn reinforce_runs_are_reproducible_and_ordered() {
    let fx = scalar(2, 0.9, None);
    let pol = policy(&fx, 0.3);
    let mut b1 = RunningBaseline::new();
    let mut b2 = RunningBaseline::new();
    let r1 = reinforce_gradient(&fx.env, &pol, &opts(16, 3), &mut b1).unwrap();
    let r2 = reinforce_gradient(&fx.env, &pol, &opts(16, 3), &mut b2).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(b1.count(), 16);
    let (eps, _) = simulate_episodes(&fx.env, &pol, &opts(16, 3)).unwrap();
    let returns: Vec<f64> = eps.iter().map(|e| e.ret).collect();
    assert_eq!(returns, r1.returns);
    assert!(reinforce_gradient(&fx.env, &pol, &opts(0, 3), &mut b1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn constant_reward_offset_leaves_the_gradient_unchanged(offset in -20.0f64..20.0, seed in 0u64..1000) {
        let fx = scalar(2, 0.9, None);
        let pol = policy(&fx, 0.3);
        let shifted = Offset { inner: &fx.env, offset };
        // Warm the running baseline on a separate batch in both worlds.
        let mut b0 = RunningBaseline::new();
        let mut b1 = RunningBaseline::new();
        reinforce_gradient(&fx.env, &pol, &opts(50, seed + 1), &mut b0).unwrap();
        reinforce_gradient(&shifted, &pol, &opts(50, seed + 1), &mut b1).unwrap();
        let base = reinforce_gradient(&fx.env, &pol, &opts(1000, seed), &mut b0).unwrap();
        let moved = reinforce_gradient(&shifted, &pol, &opts(1000, seed), &mut b1).unwrap();
        let (eps, _) = simulate_episodes(&fx.env, &pol, &opts(1000, seed)).unwrap();
        let scores: Vec<DVector<f64>> = eps.iter().map(|e| e.score.clone()).collect();
        let adv: Vec<f64> = base.returns.iter().map(|g| g - b0.mean().unwrap()).collect();
        let se = component_stderr(&scores, &adv);
        for i in 0..base.grad.len() {
            prop_assert!((base.grad[i] - moved.grad[i]).abs() <= 3.0 * se[i] + 1e-9);
        }
    }
}

#[test]
fn quadratic_features_recover_the_riccati_value() {
    let fx = double_integrator(1, 0.8);
    let k = fx.riccati.k.clone();
    let mut rng = rng_from_seed(12);
    let mut data = Vec::new();
    for _ in 0..40 {
        let s0 = fx.env.reset(&mut rng);
        let mut s = s0.clone();
        let mut ret = 0.0;
        let mut w = 1.0;
        for _ in 0..400 {
            let a = ActionVec::new(-(&k * s.as_vector())).unwrap();
            let (r, next) = fx.env.step(&s, &a, &mut rng).unwrap();
            ret += w * r;
            w *= 0.8;
            s = next;
        }
        data.push((s0, ret));
    }
    let features = ValueFeatures::Quadratic {
        center: vec![0.0, 0.0],
        scale: vec![1.0, 1.0],
    };
    let fit = fit_value_function(&data, &features).unwrap();
    assert!(!fit.ridge);
    let p = &fx.riccati.p;
    // Weights: [1, z0, z1, z0^2, z0 z1, z1^2] against -s'Ps.
    let expected = [0.0, 0.0, 0.0, -p[(0, 0)], -2.0 * p[(0, 1)], -p[(1, 1)]];
    let scale = p.amax();
    for (w, e) in fit.model.weights.iter().zip(expected) {
        assert!((w - e).abs() <= 1e-3 * scale, "{w} vs {e}");
    }
    assert!(fit.rmse < 1e-6 * scale);
}

#[test]
fn constant_feature_fits_a_constant() {
    let data = vec![(StateVec::from_slice(&[0.3, 0.1]).unwrap(), 10.0); 3];
    let fit = fit_value_function(&data, &ValueFeatures::Constant).unwrap();
    assert!((fit.model.value(&[5.0, -2.0]) - 10.0).abs() < 1e-12);
    assert!(fit.rmse < 1e-12);
    assert!(fit_value_function(&[], &ValueFeatures::Constant).is_err());
    let bad = vec![(StateVec::from_slice(&[0.3]).unwrap(), f64::NAN)];
    assert!(fit_value_function(&bad, &ValueFeatures::Constant).is_err());
}

#[test]
fn rank_deficient_design_uses_ridge() {
    let data = vec![
        (StateVec::from_slice(&[0.3, 0.1]).unwrap(), 1.0),
        (StateVec::from_slice(&[0.5, 0.2]).unwrap(), 2.0),
    ];
    let features = ValueFeatures::Quadratic {
        center: vec![0.0, 0.0],
        scale: vec![1.0, 1.0],
    };
    let fit = fit_value_function(&data, &features).unwrap();
    assert!(fit.ridge);
    assert!(fit.rmse < 1e-6);
}

#[test]
fn value_terminal_cost_derivatives() {
    let mut rng = rng_from_seed(4);
    let center = vec![1.0, -2.0, 0.5];
    let scale = vec![2.0, 0.5, 3.0];
    let rbf = ValueFeatures::Rbf {
        center: center.clone(),
        scale: scale.clone(),
        centers: (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        width: 0.8,
    };
    let quad = ValueFeatures::Quadratic { center, scale };
    for features in [rbf, quad, ValueFeatures::Constant] {
        let k = features.len(3);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = ValueModel::new(features, weights, 3).unwrap();
        let mut cost = ValueTerminalCost::new(model.clone(), 2);
        cost.input_center = DVector::from_vec(vec![0.5, 0.0, -1.0]);
        cost.input_scale = DVector::from_vec(vec![2.0, 1.0, 0.5]);
        let phi = DVector::from_vec(vec![0.3, -0.2]);
        for _ in 0..3 {
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let mut findings = Vec::new();
            check_map(&cost, &v, &phi, &mut findings);
            assert!(findings.is_empty(), "{findings:?}");
            let s: Vec<f64> = (0..3).map(|i| cost.input_center[i] + cost.input_scale[i] * v[i]).collect();
            assert_eq!(cost.eval(&v, &phi)[0], -model.value(&s));
        }
    }
    assert!(ValueModel::new(ValueFeatures::Constant, vec![1.0, 2.0], 3).is_err());
}

#[test]
fn zero_perturbation_keeps_the_policy() {
    let fx = double_integrator(4, 0.9);
    let (spec, c) = perturbed_cost_exploration(&fx.spec, 0.0, 1).unwrap();
    assert_eq!(c.amax(), 0.0);
    let s = StateVec::from_slice(&[0.4, -0.3]).unwrap();
    let (a0, _) = mpc_policy(&fx.spec, &s, None).unwrap();
    let (a1, _) = mpc_policy(&spec, &s, None).unwrap();
    assert!((a0.as_vector() - a1.as_vector()).amax() <= 1e-12);
    assert!(perturbed_cost_exploration(&fx.spec, -1.0, 1).is_err());
}

#[test]
fn linear_cost_term_pushes_the_action_against_its_sign() {
    let fx = scalar(3, 0.9, None);
    let s = StateVec::from_slice(&[0.8]).unwrap();
    let (nominal, _) = mpc_policy(&fx.spec, &s, None).unwrap();
    let mut seen = (false, false);
    for seed in 0..8 {
        let (spec, c) = perturbed_cost_exploration(&fx.spec, 0.05, seed).unwrap();
        assert!((c.norm() - 0.05).abs() < 1e-15);
        let (a, _) = mpc_policy(&spec, &s, None).unwrap();
        if c[0] > 0.0 {
            assert!(a[0] < nominal[0]);
            seen.0 = true;
        } else {
            assert!(a[0] > nominal[0]);
            seen.1 = true;
        }
    }
    assert!(seen.0 && seen.1);
}

#[test]
fn exploration_shares_dynamics_and_constraints() {
    let fx = scalar(3, 0.9, Some((-0.2, 0.2)));
    let (spec, _) = perturbed_cost_exploration(&fx.spec, 0.5, 3).unwrap();
    assert!(Arc::ptr_eq(&spec.dynamics, &fx.spec.dynamics));
    assert!(Arc::ptr_eq(spec.ineq_constraints.as_ref().unwrap(), fx.spec.ineq_constraints.as_ref().unwrap()));
    assert!(spec.eq_constraints.is_none());
    assert!(!Arc::ptr_eq(&spec.stage_cost, &fx.spec.stage_cost));
    // The perturbed closed loop still respects the input bounds.
    let mut s = StateVec::from_slice(&[3.0]).unwrap();
    let mut rng = rng_from_seed(0);
    for _ in 0..20 {
        let (a, _) = mpc_policy(&spec, &s, None).unwrap();
        assert!(a[0] <= 0.2 + 1e-8 && a[0] >= -0.2 - 1e-8);
        s = fx.env.step(&s, &a, &mut rng).unwrap().1;
    }
}
