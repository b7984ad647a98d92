use nalgebra::DMatrix;
use proptest::prelude::*;
use steinlab::model::*;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
}

#[test]
fn linear_examples() {
    let (_, t) = make_linear_model(DMatrix::identity(2, 2)).unwrap();
    assert_eq!((t.theta0, t.theta1, t.theta2, t.theta3, t.theta4), (1.0, 0.0, 1.0, 1.0, 1.0));
    let (m, t) = make_linear_model(diag(&[2.0, 1.0])).unwrap();
    assert_eq!(m.drift_vec(&[1.0, 0.0]), vec![-2.0, 0.0]);
    assert_eq!((t.theta0, t.theta4), (1.0, 2.0));
    assert_eq!(m.jacobian_vec(&[5.0, -3.0], &[1.0, 1.0]), vec![-2.0, -1.0]);
    assert_eq!(m.hessian_vec(&[5.0, -3.0], &[1.0, 1.0], &[0.5, 2.0]), vec![0.0, 0.0]);
}

#[test]
fn power_examples() {
    let (m, _) = make_power_model(1.0, 0.0, 2).unwrap();
    assert_eq!(m.drift_vec(&[0.7, -1.3]), vec![-0.7, 1.3]);
    let (m, t) = make_power_model(1.0, 2.0, 1).unwrap();
    assert!((m.jacobian_vec(&[1.0], &[1.0])[0] + 4.0).abs() < 1e-12);
    assert!((m.drift_vec(&[2.0])[0] + 10.0).abs() < 1e-12);
    assert_eq!((t.theta0, t.theta1, t.theta2), (1.0, 1.0, 2.0));
    let probes = default_probe_grid(1, 10.0, 41, 8, 3);
    assert!(probe_assumption(&m, &t, &probes).unwrap().pass);
}

#[test]
fn linear_probe_has_zero_slack_on_every_probe() {
    let (m, t) = make_linear_model(DMatrix::identity(2, 2)).unwrap();
    let r = probe_assumption(&m, &t, &default_probe_grid(2, 7.0, 8, 12, 9)).unwrap();
    assert!(r.pass);
    for s in &r.slacks {
        assert!(s.a2.abs() < 1e-12, "{}", s.a2);
    }
}

#[test]
fn counterexample_fails_near_the_origin() {
    let m = DriftModel::counterexample(1.0, 3.0, 1).unwrap();
    let theta = ThetaParams::new(0.01, 1.0, 3.0, 100.0, 1.0).unwrap();
    let probes = default_probe_grid(1, 5.0, 11, 8, 1);
    let r = probe_assumption(&m, &theta, &probes).unwrap();
    assert!(!r.pass);
    assert!(probes[r.worst_a2_probe].x[0].abs() < 1.0);
}

#[test]
fn contraction_examples() {
    let k = |a: DMatrix<f64>| {
        let (m, _) = make_linear_model(a).unwrap();
        contraction_constants(&m, &ContractionMode::Analytic).unwrap()
    };
    let c = k(DMatrix::identity(1, 1));
    assert_eq!((c.kappa.eval(1.0), c.r0, c.r1, c.c), (2.0, 0.0, 2.0, 0.5));
    let c = k(DMatrix::from_element(1, 1, 2.0));
    assert_eq!(c.kappa.eval(1.0), 4.0);
    assert!((c.r1 - 2f64.sqrt()).abs() < 1e-15 && (c.c - 1.0).abs() < 1e-15);
    let c = k(diag(&[2.0, 1.0]));
    assert_eq!((c.kappa.eval(0.3), c.c), (2.0, 0.5));
}

#[test]
fn probed_contraction_agrees_with_analytic_on_linear() {
    let (m, _) = make_linear_model(DMatrix::identity(2, 2)).unwrap();
    let probe = KappaProbe { pairs_per_radius: 200, ..KappaProbe::default() };
    let c = contraction_constants(&m, &ContractionMode::Probed(probe)).unwrap();
    assert!((c.c - 0.5).abs() < 1e-9, "{}", c.c);
}

#[test]
fn analytic_constants_need_linear_drift() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    assert!(contraction_constants(&m, &ContractionMode::Analytic).is_err());
}

#[test]
fn model_spec_round_trips_through_json() {
    let spec = ModelSpec::Power { c: 1.5, p: 2.0, d: 2 };
    let s = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<ModelSpec>(&s).unwrap(), spec);
    assert_eq!(spec.build().unwrap().0.dim(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jacobian_is_linear_and_hessian_symmetric(
        c in 0.1f64..3.0, p in 0.0f64..4.0,
        x in prop::collection::vec(-4.0f64..4.0, 3),
        u1 in prop::collection::vec(-2.0f64..2.0, 3),
        u2 in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let (m, _) = make_power_model(c, p, 3).unwrap();
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let js = m.jacobian_vec(&x, &sum);
        let (j1, j2) = (m.jacobian_vec(&x, &u1), m.jacobian_vec(&x, &u2));
        for i in 0..3 {
            let scale = js[i].abs().max(j1[i].abs()).max(j2[i].abs()).max(1.0);
            prop_assert!((js[i] - j1[i] - j2[i]).abs() <= 1e-10 * scale);
        }
        let h12 = m.hessian_vec(&x, &u1, &u2);
        let h21 = m.hessian_vec(&x, &u2, &u1);
        for i in 0..3 {
            prop_assert!((h12[i] - h21[i]).abs() <= 1e-10 * h12[i].abs().max(1.0));
        }
    }

    #[test]
    fn power_jacobian_matches_finite_differences(c in 0.1f64..2.0, p in 0.0f64..3.0, x in prop::collection::vec(-2.0f64..2.0, 2), u in prop::collection::vec(-1.0f64..1.0, 2)) {
        let (m, _) = make_power_model(c, p, 2).unwrap();
        let eps = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - eps * b).collect();
        let (gp, gm) = (m.drift_vec(&xp), m.drift_vec(&xm));
        let j = m.jacobian_vec(&x, &u);
        for i in 0..2 {
            prop_assert!(((gp[i] - gm[i]) / (2.0 * eps) - j[i]).abs() <= 1e-5 * j[i].abs().max(1.0));
        }
    }

    #[test]
    fn second_moment_bound_is_monotone_in_time(t in 0.0f64..10.0, x2 in 0.0f64..50.0) {
        let th = ThetaParams::new(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        prop_assert!(th.second_moment_bound(t + 0.5, x2, 1, 0.0) <= th.second_moment_bound(t, x2, 1, 0.0));
    }
}
