use nalgebra::DMatrix;
use proptest::prelude::*;
use steinlab::model::*;
use steinlab::paths::*;
use steinlab::stats;

fn ou() -> (DriftModel, ThetaParams) {
    make_linear_model(DMatrix::identity(1, 1)).unwrap()
}

#[test]
fn linear_variation_is_matrix_exponential() {
    let (m, _) = ou();
    for steps in [100, 200] {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let noise = BrownianPath::sample(1, grid, 1, 0);
        let state = simulate_state(&m, &[0.4], grid, &noise).unwrap();
        let v = simulate_variation1(&m, &state, &[1.0], grid).unwrap();
        let dt = grid.dt();
        // Heun: global error O(dt^2).
        assert!((v.terminal()[0] - (-1f64).exp()).abs() <= dt * dt, "{}", v.terminal()[0]);
        let z = simulate_variation1(&m, &state, &[0.0], grid).unwrap();
        assert!(z.as_slice().iter().all(|x| *x == 0.0));
    }
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let (m, _) = make_linear_model(a.clone()).unwrap();
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let state = simulate_state(&m, &[0.0, 0.0], grid, &BrownianPath::sample(2, grid, 2, 0)).unwrap();
    let v = simulate_variation1(&m, &state, &[1.0, -1.0], grid).unwrap();
    let exact = (-a).exp() * nalgebra::DVector::from_row_slice(&[1.0, -1.0]);
    for i in 0..2 {
        assert!((v.terminal()[i] - exact[i]).abs() < 1e-6);
    }
}

#[test]
fn second_variation_and_malliavin_vanish_for_linear_drift() {
    let (m, _) = ou();
    let grid = TimeGrid::new(2.0, 400).unwrap();
    let noise = BrownianPath::sample(1, grid, 4, 0);
    let b = simulate_bundle(&m, &[1.0], &noise, &FlowRequest::full(vec![1.0], vec![2.0])).unwrap();
    assert!(b.var12.unwrap().as_slice().iter().all(|x| *x == 0.0));
    assert!(b.malliavin.unwrap().as_slice().iter().all(|x| *x == 0.0));
}

#[test]
fn power_second_variation_vanishes_on_the_resting_path() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let b = simulate_bundle(&m, &[0.0], &BrownianPath::zero(1, grid), &FlowRequest::full(vec![1.0], vec![1.0])).unwrap();
    assert!(b.state.as_slice().iter().all(|x| *x == 0.0));
    assert!(b.var12.unwrap().as_slice().iter().all(|x| *x == 0.0));
}

#[test]
fn malliavin_flow_is_linear_in_the_shift_direction() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let noise = BrownianPath::sample(1, grid, 8, 0);
    let state = simulate_state(&m, &[0.7], grid, &noise).unwrap();
    let v1 = simulate_variation1(&m, &state, &[1.0], grid).unwrap();
    let v2 = simulate_variation1(&m, &state, &[0.5], grid).unwrap();
    let v3 = simulate_variation1(&m, &state, &[1.0], grid).unwrap();
    let a = simulate_malliavin(&m, &state, &v1, &v2, grid, 1.0).unwrap();
    let b = simulate_malliavin(&m, &state, &v1, &v3, grid, 1.0).unwrap();
    assert!(a.max_norm() > 0.0);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
    assert!(simulate_malliavin(&m, &state, &v1, &v2, grid, 0.5).is_err());
}

#[test]
fn dv_equals_variation_on_linear_model() {
    let (m, _) = ou();
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let noise = BrownianPath::sample(1, grid, 6, 0);
    let r = verify_dv_equals_variation(&m, &[0.3], grid, &noise, &[1.0]).unwrap();
    assert!(r.terminal_discrepancy <= 5.0 * grid.dt());
    assert!(r.midpoint_discrepancy <= 5.0 * grid.dt());
    let r = verify_dv_equals_variation(&m, &[0.3], grid, &noise, &[0.0]).unwrap();
    assert_eq!(r.terminal_discrepancy, 0.0);
}

#[test]
fn malliavin_derivative_matches_shifted_noise() {
    // D_V X_t with v = grad_u X / (sqrt 2 t) equals the variation at t.
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(1.0, 500).unwrap();
    let noise = BrownianPath::sample(1, grid, 12, 0);
    let state = simulate_state(&m, &[0.5], grid, &noise).unwrap();
    let var = simulate_variation1(&m, &state, &[1.0], grid).unwrap();
    let v: Vec<f64> = (0..grid.steps()).map(|k| var.at(k)[0] / (2f64.sqrt() * 1.0)).collect();
    let fd = malliavin_fd(&m, &[0.5], &noise, &v, 1e-5).unwrap();
    assert!((fd.terminal()[0] - var.terminal()[0]).abs() <= 5.0 * grid.dt(), "{} {}", fd.terminal()[0], var.terminal()[0]);
}

#[test]
fn flow_composition_for_linear_model() {
    let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7]);
    let (m, _) = make_linear_model(a).unwrap();
    let grid = TimeGrid::new(2.0, 400).unwrap();
    let state = simulate_state(&m, &[1.0, 1.0], grid, &BrownianPath::sample(2, grid, 3, 1)).unwrap();
    let full = propagator(&m, &state, grid, 0, 400).unwrap();
    let split = propagator(&m, &state, grid, 150, 400).unwrap() * propagator(&m, &state, grid, 0, 150).unwrap();
    assert!((full - split).abs().max() <= 5.0 * grid.dt());
}

#[test]
fn seeding_is_deterministic() {
    let (m, _) = make_power_model(1.0, 2.0, 2).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let req = FlowRequest::full(vec![1.0, 0.0], vec![0.0, 1.0]);
    let a = simulate_bundle(&m, &[0.2, 0.1], &BrownianPath::sample(2, grid, 77, 5), &req).unwrap();
    let b = simulate_bundle(&m, &[0.2, 0.1], &BrownianPath::sample(2, grid, 77, 5), &req).unwrap();
    assert_eq!(a, b);
    let c = simulate_bundle(&m, &[0.2, 0.1], &BrownianPath::sample(2, grid, 77, 6), &req).unwrap();
    assert_ne!(a.state, c.state);
}

#[test]
fn strong_order_one_under_refinement() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(1.0, 25).unwrap();
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    for r in 0..200 {
        let b1 = BrownianPath::sample(1, grid, 21, r);
        let b2 = b1.refine();
        let b3 = b2.refine();
        let x1 = simulate_state(&m, &[0.5], grid, &b1).unwrap().terminal()[0];
        let x2 = simulate_state(&m, &[0.5], b2.grid(), &b2).unwrap().terminal()[0];
        let x3 = simulate_state(&m, &[0.5], b3.grid(), &b3).unwrap().terminal()[0];
        e1 += (x1 - x2).powi(2);
        e2 += (x2 - x3).powi(2);
    }
    let ratio = (e1 / e2).sqrt();
    assert!((1.6..2.6).contains(&ratio), "{ratio}");
}

#[test]
fn refined_noise_shares_the_coarse_path() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let b = BrownianPath::sample(2, grid, 4, 4);
    let r = b.refine();
    assert_eq!(r.grid().steps(), 20);
    let back = r.coarsen().unwrap();
    for (x, y) in back.increments().iter().zip(b.increments()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn second_moment_bound_over_ten_thousand_paths() {
    let (m, t) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(2.0, 400).unwrap();
    let x0 = [2.0];
    let s = stats::par_fill(10_000, 1, || (), |_, i, row| {
        let p = simulate_state(&m, &x0, grid, &BrownianPath::sample(1, grid, 13, i as u64))?;
        row[0] = p.terminal()[0].powi(2);
        Ok(())
    })
    .unwrap();
    let e = s.column_mean_se(0);
    let g0 = m.drift_vec(&[0.0])[0];
    assert!(e.mean <= t.second_moment_bound(2.0, 4.0, 1, g0 * g0) + 3.0 * e.se);
}

#[test]
fn divergence_guard_rejects_unstable_steps() {
    let (m, _) = make_power_model(1.0, 2.0, 1).unwrap();
    let grid = TimeGrid::new(10.0, 10).unwrap();
    assert!(matches!(simulate_state(&m, &[5.0], grid, &BrownianPath::zero(1, grid)), Err(steinlab::Error::Divergence { .. })));
}

#[test]
fn path_dump_has_header_and_one_row_per_node() {
    let (m, _) = ou();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let b = simulate_bundle(&m, &[0.0], &BrownianPath::sample(1, grid, 1, 0), &FlowRequest::first(vec![1.0])).unwrap();
    let mut buf = Vec::new();
    b.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,t,x0,var1_0");
    assert_eq!(text.lines().count(), 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deterministic_jacobian_bound_holds_per_path(c in 0.5f64..2.0, p in 0.0f64..3.0, x0 in prop::collection::vec(-2.0f64..2.0, 2), seed in 0u64..1000) {
        let (m, t) = make_power_model(c, p, 2).unwrap();
        let grid = TimeGrid::new(2.0, 2000).unwrap();
        for r in 0..8 {
            let b = simulate_bundle(&m, &x0, &BrownianPath::sample(2, grid, seed, r), &FlowRequest::first(vec![0.6, -0.8])).unwrap();
            prop_assert!(b.variation_bound_ratio(t.theta0) <= 1.0 + 10.0 * grid.dt());
        }
    }
}
