use super::*;

fn gamma(g: f64) -> DiscountConfig {
    DiscountConfig::new(g).unwrap()
}

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn lq_data() -> LqOcpData {
    LqOcpData {
        a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
        b: DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
        q: DMatrix::identity(2, 2),
        r: m1(0.1),
        p_terminal: DMatrix::identity(2, 2) * 2.0,
        terminal_offset: 0.0,
        horizon: 4,
        bounds: None,
        gamma: gamma(0.9),
        discount_in_horizon: true,
    }
}

#[derive(Debug)]
struct TransposedJacobian;

impl SmoothMap for TransposedJacobian {
    fn name(&self) -> &str {
        "skew_constraint"
    }
    fn in_dim(&self) -> usize {
        2
    }
    fn out_dim(&self) -> usize {
        2
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[v[0] + 3.0 * v[1], v[1]])
    }
    fn jac(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        // The correct jacobian is [[1, 3], [0, 1]].
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 1.0])
    }
    fn jac_phi(&self, _v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, phi.len())
    }
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2, 2))
    }
}

#[test]
fn decoupled_input_objective() {
    let data = LqOcpData {
        a: m1(0.7),
        b: m1(0.0),
        q: m1(1.0),
        r: m1(2.5),
        p_terminal: m1(1.0),
        terminal_offset: 0.0,
        horizon: 1,
        bounds: None,
        gamma: gamma(0.9),
        discount_in_horizon: true,
    };
    let spec = build_lq_ocp(&data).unwrap();
    let s = StateVec::from_slice(&[1.3]).unwrap();
    let base = eval_open_loop(&spec, &s, &[DVector::zeros(1)]).unwrap().cost;
    for u in [-2.0, 0.5, 3.0] {
        let c = eval_open_loop(&spec, &s, &[DVector::from_element(1, u)]).unwrap().cost;
        assert!((c - base - 2.5 * u * u).abs() < 1e-12);
    }
}

#[test]
fn parameter_layout_round_trip() {
    let data = lq_data();
    let spec = build_lq_ocp(&data).unwrap();
    let (a, b) = lq_model_matrices(spec.params(), 2, 1).unwrap();
    assert_eq!(a, data.a);
    assert_eq!(b, data.b);
    let layout = spec.params().layout();
    let total: usize = layout.segments().iter().map(|s| s.len).sum();
    assert_eq!(total, spec.params().len());
    for w in layout.segments().windows(2) {
        assert_eq!(w[0].offset + w[0].len, w[1].offset);
    }
}

#[test]
fn zero_everything_costs_nothing() {
    let data = LqOcpData {
        a: DMatrix::zeros(2, 2),
        b: DMatrix::zeros(2, 1),
        q: DMatrix::zeros(2, 2),
        r: m1(1.0),
        p_terminal: DMatrix::zeros(2, 2),
        terminal_offset: 0.0,
        horizon: 3,
        bounds: None,
        gamma: gamma(0.9),
        discount_in_horizon: true,
    };
    let spec = build_lq_ocp(&data).unwrap();
    let s = StateVec::from_slice(&[1.0, -1.0]).unwrap();
    let plan = eval_open_loop(&spec, &s, &vec![DVector::zeros(1); 3]).unwrap();
    assert_eq!(plan.cost, 0.0);
    assert_eq!(plan.x_seq.len(), 4);
}

#[test]
fn constraint_violation_is_reported() {
    let mut data = lq_data();
    data.horizon = 1;
    data.bounds = Some(InputBounds {
        lower: DVector::from_element(1, -10.0),
        upper: DVector::from_element(1, 1.0),
    });
    let spec = build_lq_ocp(&data).unwrap();
    let s = StateVec::from_slice(&[0.0, 0.0]).unwrap();
    let plan = eval_open_loop(&spec, &s, &[DVector::from_element(1, 2.0)]).unwrap();
    assert!((plan.ineq_values[0][0] - 1.0).abs() < 1e-15);
    assert!((plan.max_ineq_violation() - 1.0).abs() < 1e-15);
}

#[test]
fn open_loop_is_pure_and_discounted() {
    let spec = build_lq_ocp(&lq_data()).unwrap();
    let s = StateVec::from_slice(&[0.4, -0.2]).unwrap();
    let u: Vec<_> = (0..4).map(|k| DVector::from_element(1, 0.1 * k as f64)).collect();
    let p1 = eval_open_loop(&spec, &s, &u).unwrap();
    let p2 = eval_open_loop(&spec, &s, &u).unwrap();
    assert_eq!(p1, p2);

    // Independent recomputation of the discounted sum.
    let data = lq_data();
    let mut x = DVector::from_column_slice(&[0.4, -0.2]);
    let mut total = 0.0;
    for (k, uk) in u.iter().enumerate() {
        total += 0.9_f64.powi(k as i32) * ((x.transpose() * &data.q * &x)[0] + (uk.transpose() * &data.r * uk)[0]);
        x = &data.a * &x + &data.b * uk;
    }
    total += 0.9_f64.powi(4) * (x.transpose() * &data.p_terminal * &x)[0];
    assert!((p1.cost - total).abs() < 1e-12);
}

#[test]
fn validate_clean_lq_spec() {
    let mut data = lq_data();
    data.bounds = Some(InputBounds {
        lower: DVector::from_element(1, -1.0),
        upper: DVector::from_element(1, 1.0),
    });
    let spec = build_lq_ocp(&data).unwrap();
    let findings = validate_spec(&spec);
    assert!(findings.is_empty(), "{findings:?}");
}

#[test]
fn validate_flags_transposed_jacobian() {
    let data = LqOcpData {
        a: m1(1.0),
        b: m1(1.0),
        q: m1(1.0),
        r: m1(1.0),
        p_terminal: m1(1.0),
        terminal_offset: 0.0,
        horizon: 2,
        bounds: None,
        gamma: gamma(0.9),
        discount_in_horizon: true,
    };
    let base = build_lq_ocp(&data).unwrap();
    let mut parts = base.to_parts();
    parts.eq_constraints = Some(Arc::new(TransposedJacobian));
    let spec = OcpSpec::new(parts).unwrap();
    let findings = validate_spec(&spec);
    let bad: Vec<_> = findings
        .iter()
        .filter(|f| f.kind == FindingKind::Jacobian)
        .collect();
    assert_eq!(bad.len(), 1, "{findings:?}");
    assert_eq!(bad[0].callback, "skew_constraint");
    assert!((bad[0].max_deviation - 1.0).abs() < 1e-6, "{}", bad[0].max_deviation);
}

#[test]
fn missing_hessian_is_flagged() {
    #[derive(Debug)]
    struct NoHessian;
    impl SmoothMap for NoHessian {
        fn name(&self) -> &str {
            "cubic"
        }
        fn in_dim(&self) -> usize {
            2
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, v[0].powi(3) + v[1] * v[1])
        }
        fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[3.0 * v[0] * v[0], 2.0 * v[1]])
        }
        fn jac_phi(&self, _v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(1, phi.len())
        }
    }
    let mut findings = Vec::new();
    let v = DVector::from_column_slice(&[0.5, 1.0]);
    check_map(&NoHessian, &v, &DVector::zeros(0), &mut findings);
    assert_eq!(findings.len(), 1);
    assert_eq!(findings[0].kind, FindingKind::FiniteDifferenceFallback);
    let (h, approx) = weighted_hessian(&NoHessian, &v, &DVector::zeros(0), &DVector::from_element(1, 2.0));
    assert!(approx);
    assert!((h[(0, 0)] - 6.0).abs() < 1e-5);
    assert!((h[(1, 1)] - 4.0).abs() < 1e-5);
}

#[test]
fn builder_rejects_bad_inputs() {
    let mut data = lq_data();
    data.r = m1(-1.0);
    assert!(build_lq_ocp(&data).is_err());
    let mut data = lq_data();
    data.b = DMatrix::zeros(3, 1);
    assert!(matches!(build_lq_ocp(&data), Err(Error::Dimension { .. })));
    let mut data = lq_data();
    data.horizon = 0;
    assert!(build_lq_ocp(&data).is_err());
}

#[test]
fn open_loop_checks_sequence_length() {
    let spec = build_lq_ocp(&lq_data()).unwrap();
    let s = StateVec::from_slice(&[0.0, 0.0]).unwrap();
    assert!(eval_open_loop(&spec, &s, &[DVector::zeros(1)]).is_err());
}
