use nalgebra::DMatrix;
use steinlab::bismut::*;
use steinlab::functions::TestFunction;
use steinlab::model::*;
use steinlab::paths::*;
use steinlab::stats::par_fill;

const OU_VAR: f64 = 0.216_166_179_2; // (1 - e^{-2}) / 4

fn ou() -> DriftModel {
    make_linear_model(DMatrix::identity(1, 1)).unwrap().0
}

fn cfg(replicas: usize, dt: f64, seed: u64) -> McConfig {
    McConfig { replicas, dt, seed }
}

#[test]
fn ou_weight_moments() {
    let m = ou();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let req = FlowRequest::full(vec![1.0], vec![1.0]);
    let s = par_fill(20_000, 4, || (), |_, i, row| {
        let b = simulate_bundle(&m, &[0.5], &BrownianPath::sample(1, grid, 5, i as u64), &req)?;
        let w = weights(&b, 1.0)?;
        row[0] = w.i_u1;
        row[1] = w.i_u1 * w.i_u1;
        row[2] = w.dv2_i_u1.unwrap();
        row[3] = w.i_u1_u2.unwrap();
        Ok(())
    })
    .unwrap();
    let mean = s.column_mean_se(0);
    assert!(mean.mean.abs() <= 3.0 * mean.se);
    let var = s.column_mean_se(1);
    assert!((var.mean - OU_VAR).abs() <= 3.0 * var.se + 0.005, "{}", var.mean);
    // D_V I is deterministic here; the trapezoid leaves O(dt^2).
    for v in s.column(2) {
        assert!((v - OU_VAR).abs() < 1e-4, "{v}");
    }
    let second = s.column_mean_se(3);
    assert!(second.mean.abs() <= 3.0 * second.se);
}

#[test]
fn weights_need_four_steps() {
    let m = ou();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let b = simulate_bundle(&m, &[0.0], &BrownianPath::sample(1, grid, 1, 0), &FlowRequest::first(vec![1.0])).unwrap();
    assert!(weight_first(&b, 0.03).is_err());
    assert!(weight_first(&b, 0.04).is_ok());
    assert!(weight_malliavin(&b, 1.0).is_err());
}

#[test]
fn zero_drift_bel_is_exact_in_distribution() {
    // X = x + sqrt 2 B, I_u(t) = B_t / (sqrt 2 t), grad E X_t = 1.
    let m = DriftModel::zero(1);
    let h = TestFunction::coordinate(1, 0).unwrap();
    let r = verify_bel(&m, &[0.3], 1.0, &h, &[1.0], 1e-3, &cfg(20_000, 0.01, 2)).unwrap();
    assert!((r.fd_value - 1.0).abs() < 1e-9);
    assert!((r.bismut_value - 1.0).abs() <= 3.0 * r.bismut_se);
    assert!(r.pass);
}

#[test]
fn ibp_bel_and_second_order_on_ou() {
    let m = ou();
    let c = cfg(20_000, 0.01, 3);
    let x1 = TestFunction::coordinate(1, 0).unwrap();
    let sq = TestFunction::coordinate_square(1, 0).unwrap();
    let sin = TestFunction::sin_coordinate(1, 0).unwrap();
    for h in [&x1, &sq, &sin] {
        let r = verify_ibp(&m, &[0.5], 1.0, h, &[1.0], &c).unwrap();
        assert!(r.pass, "ibp {}: {} vs {} (se {})", h.name(), r.lhs, r.rhs, r.se);
        let r = verify_bel(&m, &[0.5], 1.0, h, &[1.0], 1e-3, &c).unwrap();
        assert!(r.pass, "bel {}: {} vs {}", h.name(), r.fd_value, r.bismut_value);
    }
    // grad_u E X_1 = e^{-1} exactly for OU.
    let r = verify_bel(&m, &[0.5], 1.0, &x1, &[1.0], 1e-3, &c).unwrap();
    assert!((r.fd_value - (-1f64).exp()).abs() < 0.01 * 1.01);
    let r = verify_second_order(&m, &[0.5], 1.0, &sq, &[1.0], &[1.0], &c).unwrap();
    assert!(r.pass, "{} vs {}", r.lhs, r.rhs);
}

#[test]
fn identities_on_power_drift_in_two_dimensions() {
    let (m, _) = make_power_model(1.0, 2.0, 2).unwrap();
    let c = cfg(20_000, 0.01, 4);
    let h = TestFunction::sin_coordinate(2, 0).unwrap();
    let x0 = [0.5, -0.3];
    let (u1, u2) = ([1.0, 0.0], [0.6, 0.8]);
    assert!(verify_ibp(&m, &x0, 1.0, &h, &u2, &c).unwrap().pass);
    assert!(verify_bel(&m, &x0, 1.0, &h, &u1, 1e-3, &c).unwrap().pass);
    let so = verify_second_order(&m, &x0, 1.0, &TestFunction::square_norm(2), &u1, &u2, &c).unwrap();
    assert!(so.pass, "{} vs {} (se {})", so.lhs, so.rhs, so.se);
}

#[test]
fn gradient_of_semigroup_is_bounded_by_lipschitz_constant() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let sin = TestFunction::sin_coordinate(1, 0).unwrap();
    for x0 in [-1.5, 0.0, 0.8] {
        let r = verify_bel(&m, &[x0], 0.5, &sin, &[1.0], 1e-3, &cfg(10_000, 0.01, 6)).unwrap();
        assert!(r.bismut_value.abs() <= (-0.5f64).exp() + 3.0 * r.bismut_se, "{}", r.bismut_value);
    }
}

#[test]
fn moment_scaling_in_the_small_time_regime() {
    let (m, _) = make_linear_model(DMatrix::from_element(1, 1, 0.05)).unwrap();
    let ts = [0.25, 0.5, 1.0, 2.0];
    let r = moment_scaling(&m, &[1.0], &[1.0], &[1.0], &ts, &cfg(20_000, 1.0 / 32.0, 7)).unwrap();
    assert!((r.fit_i_u1.slope + 0.5).abs() < 0.1, "{}", r.fit_i_u1.slope);
    assert!((r.fit_dv2_i_u1.slope + 1.0).abs() < 0.1, "{}", r.fit_dv2_i_u1.slope);
    assert!((r.fit_i_u1_u2.slope + 1.0).abs() < 0.1, "{}", r.fit_i_u1_u2.slope);
}

#[test]
fn bad_inputs_are_rejected() {
    let m = ou();
    let h = TestFunction::coordinate(1, 0).unwrap();
    assert!(verify_bel(&m, &[0.0], 1.0, &h, &[1.0], 0.5, &cfg(100, 0.01, 0)).is_err());
    assert!(verify_ibp(&m, &[0.0, 1.0], 1.0, &h, &[1.0], &cfg(100, 0.01, 0)).is_err());
    assert!(verify_ibp(&m, &[0.0], 1.0, &h, &[1.0], &cfg(1, 0.01, 0)).is_err());
    assert!(moment_scaling(&m, &[0.0], &[1.0], &[1.0], &[1.0], &cfg(100, 0.01, 0)).is_err());
}

#[test]
fn ito_sum_matches_manual_sum() {
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let noise = BrownianPath::sample(1, grid, 1, 1);
    let p = Path::from_data(1, (0..9).map(|k| k as f64).collect());
    let manual: f64 = (0..8).map(|k| k as f64 * noise.increment(k)[0]).sum();
    assert!((ito_sum(&p, &noise, 8) - manual).abs() < 1e-14);
}
