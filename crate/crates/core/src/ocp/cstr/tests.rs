use super::*;
use crate::envs::cstr::tests::shipped_config;
use crate::envs::cstr_step;
use crate::mdp::{rng_from_seed, SimRng};
use crate::ocp::validate_spec_around;
use crate::solver::{SolverSettings, SqpSolver};
use rand::Rng;

fn scaling() -> CstrScaling {
    CstrScaling {
        center: vec![1.0, 0.6, 130.0, 130.0, 20.0, -3000.0],
        scale: vec![1.0, 0.5, 10.0, 10.0, 50.0, 4000.0],
    }
}

fn data(horizon: usize, state_constraints: bool) -> CstrOcpData {
    let env = shipped_config();
    CstrOcpData {
        terminal: Arc::new(CstrTrackingTerminal {
            weight: env.reward.tracking,
            setpoint: env.setpoint,
            scaling: scaling(),
        }),
        env,
        scaling: scaling(),
        horizon,
        gamma: DiscountConfig::new(0.95).unwrap(),
        cost_scale: 100.0,
        backoff: 1e-6,
        state_constraints,
    }
}

fn random_state(rng: &mut SimRng) -> [f64; 6] {
    [
        rng.random_range(0.3..1.5),
        rng.random_range(0.3..1.0),
        rng.random_range(120.0..135.0),
        rng.random_range(115.0..135.0),
        rng.random_range(5.0..60.0),
        rng.random_range(-8000.0..-500.0),
    ]
}

#[test]
fn callbacks_pass_derivative_checks() {
    let spec = build_cstr_ocp(&data(3, true)).unwrap();
    let findings = validate_spec_around(&spec, &DVector::zeros(6), &DVector::zeros(2), 0.3, 4);
    for f in &findings {
        assert_eq!(f.kind, crate::ocp::FindingKind::FiniteDifferenceFallback, "{f:?}");
    }
}

#[test]
fn model_reproduces_the_environment() {
    let spec = build_cstr_ocp(&data(3, true)).unwrap();
    let env = shipped_config();
    let sc = scaling();
    let mut rng = rng_from_seed(11);
    for _ in 0..20 {
        let s = random_state(&mut rng);
        let a = [rng.random_range(5.0..100.0), rng.random_range(-8500.0..0.0)];
        let (r, next) = cstr_step(&env, &StateVec::from_slice(&s).unwrap(), &ActionVec::from_slice(&a).unwrap()).unwrap();
        let mut v = sc.to_scaled_state(&s).as_slice().to_vec();
        v.extend_from_slice(sc.to_scaled_input(&a).as_slice());
        let v = DVector::from_vec(v);
        let phi = spec.params().values();
        let xi = spec.dynamics.eval(&v, phi);
        let back = sc.from_scaled_state(xi.as_slice());
        for i in 0..6 {
            assert!((back[i] - next[i]).abs() <= 1e-9 * (1.0 + next[i].abs()));
        }
        let l = spec.stage_cost.eval(&v, phi)[0];
        assert!((l + 100.0 * r).abs() <= 1e-10 * (1.0 + l.abs()), "{l} vs {r}");
    }
}

#[test]
fn constraint_rows_match_the_box() {
    let d = data(1, true);
    let spec = build_cstr_ocp(&d).unwrap();
    let sc = scaling();
    let s = [0.8, 0.5, 134.14, 130.0, 18.83, -4495.7];
    let a = [18.83, -4495.7];
    let mut v = sc.to_scaled_state(&s).as_slice().to_vec();
    v.extend_from_slice(sc.to_scaled_input(&a).as_slice());
    let h = spec.ineq_constraints.as_ref().unwrap().eval(&DVector::from_vec(v), spec.params().values());
    assert_eq!(h.len(), 12);
    let next = crate::envs::cstr_integrate(&d.env.params, &s[..4], &a, d.env.dt, d.env.substeps);
    // T_R row of the upper block, in scaled units.
    let expected = (next[2] - d.env.state_box.upper[2]) / 10.0 + 1e-6;
    assert!((h[4 + 2] - expected).abs() < 1e-12);
    let unconstrained = build_cstr_ocp(&data(1, false)).unwrap();
    assert_eq!(unconstrained.ineq_constraints.as_ref().unwrap().out_dim(), 4);
}

#[test]
fn closed_loop_mpc_stays_in_the_box() {
    let d = data(3, true);
    let spec = build_cstr_ocp(&d).unwrap();
    let sc = scaling();
    let solver = SqpSolver::new(SolverSettings {
        max_iter: 100,
        ..SolverSettings::default()
    });
    let mut s = StateVec::from_slice(&d.env.x0_low).unwrap();
    let mut warm = None;
    for _ in 0..10 {
        let (nu, kkt) = solver.policy(&spec, &sc.state(&s).unwrap(), warm.as_ref()).unwrap();
        let a = sc.action(&nu).unwrap();
        s = cstr_step(&d.env, &s, &a).unwrap().1;
        assert!(d.env.state_box.contains(s.as_slice(), 1e-9), "{:?}", s.as_slice());
        warm = Some(kkt.shifted(&sc.state(&s).unwrap()));
    }
}
