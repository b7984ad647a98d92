use nalgebra::DMatrix;
use steinlab::experiments::*;
use steinlab::model::*;
use steinlab::pair::CltDistribution;

fn ou() -> (DriftModel, ThetaParams) {
    make_linear_model(DMatrix::identity(1, 1)).unwrap()
}

#[test]
fn ula_stationary_covariance_closed_form() {
    // 1-d: S = 2s / (1 - (1 - a s)^2).
    for (a, s) in [(1.0, 0.1), (2.0, 0.05), (0.5, 0.3)] {
        let v = ula_stationary_covariance(&DMatrix::from_element(1, 1, a), s).unwrap()[(0, 0)];
        let exact = 2.0 * s / (1.0 - (1.0 - a * s).powi(2));
        assert!((v - exact).abs() < 1e-10 * exact, "{v} vs {exact}");
    }
    assert!(ula_stationary_covariance(&DMatrix::from_element(1, 1, 10.0), 0.3).is_err());
}

#[test]
fn ula_analytic_distance_examples() {
    let (m, _) = ou();
    let v = ula_analytic_w1(&m, 0.1).unwrap().unwrap();
    // sd ratio sqrt(1/(1 - s/2)) = 1.02598.
    assert!((v - 0.025_978_8 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-6, "{v}");
    let (m2, _) = make_linear_model(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
    assert!(ula_analytic_w1(&m2, 0.1).unwrap().is_none());
    let (p, _) = make_power_model(1.0, 2.0, 1).unwrap();
    assert!(ula_analytic_w1(&p, 0.1).unwrap().is_none());
}

#[test]
fn ula_scaling_small_run() {
    let (m, t) = ou();
    let cfg = UlaScalingConfig { n_samples: 2000, ..UlaScalingConfig::default() };
    let r = ula_scaling(&m, &t, &cfg).unwrap();
    assert_eq!(r.rows.len(), 4 * MIN_SEEDS);
    assert_eq!(r.summary.len(), 4);
    let analytic = r.checks.iter().find(|c| c.name == "analytic_exponent").unwrap();
    assert!(analytic.pass, "{}", analytic.detail);
    for row in &r.rows {
        assert!(row.corrected_w1 >= 0.0);
        assert_eq!(row.corrected_w1, (row.raw_w1 - row.baseline_w1).max(0.0));
        assert!(row.bound_terms.is_some());
    }
    // Same configuration, same numbers.
    assert_eq!(ula_scaling(&m, &t, &cfg).unwrap(), r);
}

#[test]
fn ula_scaling_rejects_large_steps_and_few_seeds() {
    let (m, t) = ou();
    let e = ula_scaling(&m, &t, &UlaScalingConfig { steps: vec![0.4, 0.1], ..UlaScalingConfig::default() }).unwrap_err();
    assert!(e.to_string().contains("1/e"), "{e}");
    assert!(ula_scaling(&m, &t, &UlaScalingConfig { seeds: 3, ..UlaScalingConfig::default() }).is_err());
}

#[test]
fn clt_rademacher_reference_values() {
    // n = 1: W is +-1.
    assert!((clt_rademacher_reference(1).unwrap() - 0.535_377).abs() < 1e-5);
    let a = clt_rademacher_reference(16).unwrap();
    let b = clt_rademacher_reference(64).unwrap();
    assert!((a / b - 2.0).abs() < 0.1, "{a} {b}");
}

#[test]
fn clt_sum_samples_are_standardized() {
    for dist in [CltDistribution::Rademacher, CltDistribution::BoundedUniform] {
        let w = clt_sum_samples(dist, 10, 1, 50_000, 1);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }
    assert_eq!(clt_sum_samples(CltDistribution::Rademacher, 5, 2, 10, 3), clt_sum_samples(CltDistribution::Rademacher, 5, 2, 10, 3));
}

#[test]
fn clt_rate_small_run() {
    let cfg = CltConfig { samples: 50_000, pair_replicas: 500, ..CltConfig::default() };
    let r = clt_rate(&cfg).unwrap();
    assert!(r.pass(), "{:?}", r.checks);
    assert!((r.fit.exponent - CLT_EXPONENT).abs() <= CLT_EXPONENT_TOL);
    for row in &r.rows {
        assert_eq!(row.bound_terms.as_ref().unwrap().term_r1, 0.0);
    }
}

#[test]
fn contraction_decay_small_run() {
    let (m, t) = ou();
    let cfg = ContractionConfig { n_samples: 2000, dt: 1e-2, ..ContractionConfig::default() };
    let r = contraction_decay(&m, &t, &cfg).unwrap();
    assert!(r.pass(), "{:?}", r.checks);
    assert_eq!(r.fit.kind, FitKind::SemiLog);
    assert!(r.fit.exponent >= 0.5);
}

#[test]
fn contraction_reaches_baseline_noise_at_large_times() {
    let (m, t) = ou();
    let cfg = ContractionConfig { t_grid: vec![8.0, 10.0], n_samples: 2000, dt: 1e-2, ..ContractionConfig::default() };
    let r = match contraction_decay(&m, &t, &cfg) {
        Ok(r) => r,
        // Nothing left above the noise floor to fit.
        Err(_) => return,
    };
    for s in &r.summary {
        assert!(s.mean_raw <= s.mean_baseline + 3.0 * s.baseline_sd, "{s:?}");
    }
}

#[test]
fn lemma_suite_passes_on_linear_model() {
    let (m, t) = ou();
    let budget = LemmaBudget { paths: 1000, replicas: 5000, dt: 5e-3, ..LemmaBudget::default() };
    let l = lemma_suite(&m, &t, &budget).unwrap();
    assert!(!l.refused);
    for e in &l.entries {
        assert!(e.pass, "{}: {} vs {} ({})", e.name, e.value, e.bound, e.detail);
    }
    assert!(l.pass);
    assert!(l.entries.len() >= 15);
}

#[test]
fn lemma_suite_refuses_the_counterexample() {
    let m = DriftModel::counterexample(1.0, 2.0, 1).unwrap();
    let theta = ThetaParams::new(1.0, 1.0, 2.0, 10.0, 1.0).unwrap();
    let l = lemma_suite(&m, &theta, &LemmaBudget::default()).unwrap();
    assert!(l.refused && !l.pass);
    assert_eq!(l.entries.len(), 1);
    assert!(!l.entries[0].pass);
}

#[test]
fn target_samples_for_power_model_are_centred() {
    let (p, t) = make_power_model(1.0, 2.0, 1).unwrap();
    let s = target_samples(&p, t.theta0, 4000, 0.01, 2).unwrap();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean.abs() < 0.05, "{mean}");
}
