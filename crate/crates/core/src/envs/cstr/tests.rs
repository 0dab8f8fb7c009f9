use proptest::prelude::*;

use super::*;

/// Environment section of the shipped CSTR experiment config.
pub fn shipped_config() -> CstrConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/cstr_vfmpc.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let mut doc: toml::Table = text.parse().unwrap();
    let mut env = doc.remove("env").unwrap().try_into::<toml::Table>().unwrap();
    env.remove("type");
    let cfg: CstrConfig = env.try_into().unwrap();
    cfg.validate().unwrap();
    cfg
}

// Root of the right-hand side at F = 10, Q = -2000, found offline by a
// Newton-type root finder on the same equations.
const STEADY: [f64; 4] = [0.7169328690144634, 0.60808558672455404, 135.82504340340139, 133.51791900325375];
const STEADY_U: [f64; 2] = [10.0, -2000.0];

fn state(x: &[f64; 4], u: &[f64; 2]) -> StateVec {
    StateVec::from_slice(&[x[0], x[1], x[2], x[3], u[0], u[1]]).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn steady_state_is_a_fixed_point() {
    let cfg = shipped_config();
    let rhs = cstr_rhs(&cfg.params, &DVector::from_row_slice(&STEADY), &DVector::from_row_slice(&STEADY_U));
    assert!(rhs.amax() < 1e-9, "{rhs}");
    let s = state(&STEADY, &STEADY_U);
    let (r, next) = cstr_step(&cfg, &s, &ActionVec::from_slice(&STEADY_U).unwrap()).unwrap();
    assert!(max_diff(next.as_slice(), s.as_slice()) <= 1e-6);
    assert!((r + (STEADY[1] - cfg.setpoint).powi(2) * cfg.reward.tracking).abs() < 1e-15);
}

#[test]
fn half_intervals_compose_and_refine() {
    let cfg = shipped_config();
    let x = [0.8, 0.5, 134.14, 130.0];
    let u = [18.83, -4495.7];
    let full = cstr_integrate(&cfg.params, &x, &u, cfg.dt, 2 * cfg.substeps);
    let half = cstr_integrate(&cfg.params, &x, &u, cfg.dt / 2.0, cfg.substeps);
    let two_halves = cstr_integrate(&cfg.params, &half, &u, cfg.dt / 2.0, cfg.substeps);
    assert!(max_diff(&full, &two_halves) < 1e-12);
    // Relative to magnitude: temperatures are O(100).
    let coarse = cstr_integrate(&cfg.params, &x, &u, cfg.dt, cfg.substeps);
    let rel = full.iter().zip(&coarse).map(|(a, b)| (a - b).abs() / (1.0 + a.abs())).fold(0.0, f64::max);
    assert!(rel <= 1e-8, "{rel}");
}

#[test]
fn rk4_error_shrinks_sixteenfold_per_doubling() {
    let cfg = shipped_config();
    let x = [0.8, 0.5, 134.14, 130.0];
    let u = [30.0, -6000.0];
    let dt = 4.0 * cfg.dt;
    let reference = cstr_integrate(&cfg.params, &x, &u, dt, 100 * 16);
    let err = |n: usize| max_diff(&cstr_integrate(&cfg.params, &x, &u, dt, n), &reference);
    let errs: Vec<f64> = [8, 16, 32].iter().map(|&n| err(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((13.0..19.0).contains(&ratio), "ratio {ratio}, errors {errs:?}");
    }
}

#[test]
fn step_jacobian_matches_central_differences() {
    let cfg = shipped_config();
    let v = [0.9, 0.55, 133.0, 128.0, 25.0, -3000.0];
    let (x, j) = cstr_integrate_with_jacobian(&cfg.params, &v[..4], &v[4..], cfg.dt, cfg.substeps);
    assert_eq!(x, cstr_integrate(&cfg.params, &v[..4], &v[4..], cfg.dt, cfg.substeps));
    for c in 0..N_STATE {
        let h = 1e-6 * (1.0 + v[c].abs());
        let (mut vp, mut vm) = (v, v);
        vp[c] += h;
        vm[c] -= h;
        let fp = cstr_integrate(&cfg.params, &vp[..4], &vp[4..], cfg.dt, cfg.substeps);
        let fm = cstr_integrate(&cfg.params, &vm[..4], &vm[4..], cfg.dt, cfg.substeps);
        for r in 0..N_PHYS {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            assert!((fd - j[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()), "({r},{c}) {fd} vs {}", j[(r, c)]);
        }
    }
    let rj = cstr_rhs_jacobian(&cfg.params, &DVector::from_row_slice(&v[..4]), &DVector::from_row_slice(&v[4..]));
    for c in 0..N_STATE {
        let h = 1e-6 * (1.0 + v[c].abs());
        let (mut vp, mut vm) = (v, v);
        vp[c] += h;
        vm[c] -= h;
        let f = |w: &[f64; 6]| {
            cstr_rhs(&cfg.params, &DVector::from_row_slice(&w[..4]), &DVector::from_row_slice(&w[4..]))
        };
        let fd = (f(&vp) - f(&vm)) / (2.0 * h);
        for r in 0..N_PHYS {
            assert!((fd[r] - rj[(r, c)]).abs() <= 1e-6 * (1.0 + fd[r].abs()));
        }
    }
}

#[test]
fn more_cooling_gives_colder_jacket() {
    let cfg = shipped_config();
    let x = [0.8, 0.5, 134.14, 130.0];
    let mut last = f64::INFINITY;
    for i in 0..=20 {
        let q = -8500.0 * i as f64 / 20.0;
        let next = cstr_integrate(&cfg.params, &x, &[18.0, q], cfg.dt, cfg.substeps);
        assert!(next[3] < last, "Q = {q}");
        last = next[3];
    }
}

#[test]
fn actions_are_saturated_and_remembered() {
    let cfg = shipped_config();
    let s = state(&STEADY, &STEADY_U);
    let (r, next) = cstr_step(&cfg, &s, &ActionVec::from_slice(&[500.0, 10.0]).unwrap()).unwrap();
    assert_eq!(&next.as_slice()[4..], &[100.0, 0.0]);
    let e = STEADY[1] - cfg.setpoint;
    let expected = -cfg.reward.tracking * e * e
        - cfg.reward.moves[0] * (100.0 - STEADY_U[0]).powi(2)
        - cfg.reward.moves[1] * (0.0 - STEADY_U[1]).powi(2);
    assert!((r - expected).abs() < 1e-14);
}

#[test]
fn step_rejects_bad_dimensions_and_configs() {
    let cfg = shipped_config();
    let a = ActionVec::from_slice(&STEADY_U).unwrap();
    assert!(cstr_step(&cfg, &StateVec::zeros(4), &a).is_err());
    let mut bad = cfg.clone();
    bad.substeps = 0;
    assert!(bad.validate().is_err());
    let mut bad = cfg.clone();
    bad.state_box.upper[2] = 0.0;
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.reward.moves.pop();
    assert!(bad.validate().is_err());
}

#[test]
fn violation_count_uses_a_closed_box() {
    let b = BoxBounds {
        lower: vec![0.0, 0.0],
        upper: vec![1.0, 1.0],
    };
    let inside = vec![StateVec::from_slice(&[0.5, 0.5, 99.0]).unwrap(); 4];
    assert_eq!(constraint_violation_count(&inside, &b), 0);
    let outside = vec![StateVec::from_slice(&[1.5, 0.5]).unwrap(); 7];
    assert_eq!(constraint_violation_count(&outside, &b), 7);
    let face = vec![
        StateVec::from_slice(&[1.0, 0.0]).unwrap(),
        StateVec::from_slice(&[1.0 + 5e-10, -5e-10]).unwrap(),
    ];
    assert_eq!(constraint_violation_count(&face, &b), 0);
}

#[test]
fn reset_returns_the_fixed_start() {
    let env = CstrEnv::new(shipped_config()).unwrap();
    let s = env.reset(&mut crate::mdp::rng_from_seed(3));
    assert_eq!(s.as_slice(), env.config().x0_low.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concentrations_stay_nonnegative(
        ca in 0.1f64..2.0, cb in 0.1f64..2.0, tr in 50.0f64..135.0, tk in 50.0f64..140.0,
        f in 5.0f64..100.0, q in -8500.0f64..0.0,
    ) {
        let mut cfg = shipped_config();
        cfg.clip_negative = false;
        cfg.substeps = 50;
        let mut s = state(&[ca, cb, tr, tk], &[f, q]);
        let a = ActionVec::from_slice(&[f, q]).unwrap();
        for _ in 0..5 {
            s = cstr_step(&cfg, &s, &a).unwrap().1;
            prop_assert!(s[0] >= -1e-9 && s[1] >= -1e-9, "{:?}", s.as_slice());
        }
    }
}
