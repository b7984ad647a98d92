//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Numeric arguments select a subset.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::RngExt;
use steinlab::bismut::{self, McConfig};
use steinlab::experiments::{self, ContractionConfig, CltConfig, UlaScalingConfig};
use steinlab::functions::TestFunction;
use steinlab::model::*;
use steinlab::ot::{self, EmpiricalMeasure, OtSolver};
use steinlab::pair;
use steinlab::paths::{simulate_bundle, BrownianPath, FlowRequest, TimeGrid};
use steinlab::rng;
use steinlab::stats::{self, par_fill};
use steinlab::stein::*;

type Outcome = steinlab::Result<(bool, String)>;

// Pinned budgets and tolerances.
const Z: f64 = 3.0;
const ORACLE_REPLICAS: usize = 100_000;
const ORACLE_DT: f64 = 1e-3;
const ORACLE_HORIZON: f64 = 10.0;
const ORACLE_MAX_SE: f64 = 0.01;
const ORACLE_POINT: f64 = 0.5;
const CACHE_NODES: usize = 33;
const CACHE_HALF_WIDTH: f64 = 4.0;
const CACHE_REPLICAS: usize = 2000;
const RESIDUAL_POINTS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const RESIDUAL_REPLICAS: usize = 20_000;
const RESIDUAL_DT: f64 = 2e-3;
const BISMUT_REPLICAS: usize = 100_000;
const BISMUT_DT: f64 = 1e-3;
const PATHS: usize = 10_000;
const PATH_HORIZON: f64 = 2.0;
const PATH_DT: f64 = 1e-3;
const MOMENT_TS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const MOMENT_DT: f64 = 1.0 / 64.0;
const MOMENT_REPLICAS: usize = 100_000;
const ULA_DIGITS_RTOL: f64 = 5e-5;
const OT_TOL: f64 = 1e-12;
const MODULUS_EPS: [f64; 3] = [0.2, 0.1, 0.05];
const MODULUS_REPLICAS: usize = 50_000;
const MODULUS_DT: f64 = 2e-3;

fn ou(d: usize) -> (DriftModel, ThetaParams) {
    make_linear_model(DMatrix::identity(d, d)).unwrap()
}

fn stein_cfg(replicas: usize, dt: f64, seed: u64) -> SteinConfig {
    SteinConfig {
        horizon: ORACLE_HORIZON,
        dt,
        replicas,
        seed,
        control_variates: true,
        gradient_control_variates: false,
        richardson: true,
    }
}

fn cache_spec(dt: f64, seed: u64) -> CacheSpec {
    CacheSpec {
        nodes_per_axis: CACHE_NODES,
        half_width_sd: CACHE_HALF_WIDTH,
        config: SteinConfig { richardson: false, ..stein_cfg(CACHE_REPLICAS, dt, seed) },
    }
}

fn oracle_agreement() -> Outcome {
    let (m, t) = ou(1);
    let x = ORACLE_POINT;
    let cases: [(TestFunction, f64, Option<[f64; 3]>); 3] = [
        (TestFunction::coordinate(1, 0)?, 0.0, Some([-x, -1.0, 0.0])),
        (TestFunction::coordinate_square(1, 0)?, 1.0, Some([0.5 * (1.0 - x * x), -x, -1.0])),
        (TestFunction::abs(1), (2.0 / std::f64::consts::PI).sqrt(), None),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, (h, mu, closed)) in cases.into_iter().enumerate() {
        let exact = match closed {
            Some(v) => v,
            None => [
                gaussian_oracle(&h, &[x], &OracleOrder::Value)?,
                gaussian_oracle(&h, &[x], &OracleOrder::Grad(vec![1.0]))?,
                gaussian_oracle(&h, &[x], &OracleOrder::Hess(vec![1.0], vec![1.0]))?,
            ],
        };
        let name = h.name().to_string();
        let p = SteinProblem::new(m.clone(), t, h, TargetMean::exact(mu))?;
        let cache = p.build_grad_cache(&cache_spec(ORACLE_DT, 100 + i as u64))?;
        let qs = [Quantity::Value, Quantity::Grad { u: vec![1.0] }, Quantity::Hess { u1: vec![1.0], u2: vec![1.0] }];
        let est = p.estimate_many(&[x], &qs, &stein_cfg(ORACLE_REPLICAS, ORACLE_DT, 200 + i as u64), Plugins { f: None, grad: Some(&cache) })?;
        for (e, v) in est.iter().zip(exact) {
            let ok = (e.value - v).abs() <= Z * e.std_error && e.std_error <= ORACLE_MAX_SE;
            pass &= ok;
            let note = if ok { String::new() } else { format!(" FAILED: |diff| {:.2e}, se {:.1e}, truncation tail {:.2e}", (e.value - v).abs(), e.std_error, e.truncation_tail) };
            detail.push(format!("{name} {}={:.4}/{v:.4}(se {:.4}){note}", e.quantity, e.value, e.std_error));
        }
    }
    Ok((pass, detail.join(" ")))
}

fn residuals() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    let (lin, tl) = ou(1);
    let (pow, tp) = make_power_model(1.0, 2.0, 1)?;
    for (mname, m, t) in [("linear", lin, tl), ("power", pow, tp)] {
        for (k, h) in [TestFunction::coordinate(1, 0)?, TestFunction::sin_coordinate(1, 0)?].into_iter().enumerate() {
            let mu = target_mean(&m, &t, &h, &TargetMeanMethod::DensityQuadrature { intervals: 20_000 })?;
            let p = SteinProblem::new(m.clone(), t, h, mu)?;
            let horizon = p.min_horizon().max(ORACLE_HORIZON).ceil();
            let base = SteinConfig { horizon, ..stein_cfg(RESIDUAL_REPLICAS, RESIDUAL_DT, 300 + k as u64) };
            let cache = p.build_grad_cache(&CacheSpec { config: SteinConfig { replicas: CACHE_REPLICAS, richardson: false, ..base }, ..cache_spec(RESIDUAL_DT, 0) })?;
            let mut worst: f64 = 0.0;
            for (j, &x) in RESIDUAL_POINTS.iter().enumerate() {
                let r = p.stein_residual(&[x], &SteinConfig { seed: 400 + j as u64, ..base }, &cache)?;
                pass &= r.pass;
                worst = worst.max(r.residual.abs() / r.se);
            }
            detail.push(format!("{mname}/{}: max |r|/se {worst:.2}", p.test_function().name()));
        }
    }
    Ok((pass, detail.join(", ")))
}

fn bismut_identities() -> Outcome {
    let mc = |seed| McConfig { replicas: BISMUT_REPLICAS, dt: BISMUT_DT, seed };
    let (l1, _) = ou(1);
    let (l2, _) = ou(2);
    let (p1, _) = make_power_model(1.0, 2.0, 1)?;
    let zero = DriftModel::zero(2);
    let x1 = TestFunction::coordinate(1, 0)?;
    let sq = TestFunction::coordinate_square(1, 0)?;
    let mut results = Vec::new();
    let ibp = |name: &str, c: bismut::IdentityCheck| (name.to_string(), c.pass, c.lhs, c.rhs, c.se);
    results.push(ibp("ibp linear2 x1", bismut::verify_ibp(&l2, &[1.0, 0.0], 1.0, &TestFunction::coordinate(2, 0)?, &[1.0, 0.0], &mc(1))?));
    results.push(ibp("ibp linear1 x^2", bismut::verify_ibp(&l1, &[0.5], 1.0, &sq, &[1.0], &mc(2))?));
    results.push(ibp("ibp zero <a,x>", bismut::verify_ibp(&zero, &[0.2, -0.1], 1.0, &TestFunction::linear(vec![1.0, -2.0])?, &[0.6, 0.8], &mc(3))?));
    results.push(ibp("ibp power sin", bismut::verify_ibp(&p1, &[0.5], 1.0, &TestFunction::sin_coordinate(1, 0)?, &[1.0], &mc(4))?));
    for (name, model, h, seed) in [
        ("bel linear1 x", &l1, &x1, 5),
        ("bel linear1 const", &l1, &TestFunction::constant(1, 2.0), 6),
        ("bel power x^2", &p1, &sq, 7),
    ] {
        let b = bismut::verify_bel(model, &[0.5], 1.0, h, &[1.0], 1e-3, &mc(seed))?;
        results.push((name.to_string(), b.pass, b.fd_value, b.bismut_value, b.se));
    }
    results.push(ibp("second-order linear1 x^2", bismut::verify_second_order(&l1, &[0.5], 1.0, &sq, &[1.0], &[1.0], &mc(8))?));
    results.push(ibp("second-order power x^2", bismut::verify_second_order(&p1, &[0.5], 1.0, &sq, &[1.0], &[1.0], &mc(9))?));
    let pass = results.iter().all(|r| r.1);
    let detail = results
        .iter()
        .map(|(n, p, l, r, se)| format!("{n}: {l:.4}/{r:.4} (se {se:.4}){}", if *p { "" } else { " FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((pass, detail))
}

fn per_path_bounds() -> Outcome {
    let grid = TimeGrid::new(PATH_HORIZON, (PATH_HORIZON / PATH_DT).round() as usize)?;
    let slack = 1.0 + 10.0 * PATH_DT;
    let mut pass = true;
    let mut detail = Vec::new();
    let models = [
        ("linear1", ou(1)),
        ("linear2-aniso", make_linear_model(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]))?),
        ("power1", make_power_model(1.0, 2.0, 1)?),
        ("power2", make_power_model(1.0, 2.0, 2)?),
    ];
    for (k, (name, (m, t))) in models.into_iter().enumerate() {
        let d = m.dim();
        let mut x0 = vec![0.0; d];
        x0[0] = 1.5;
        let mut u = vec![0.0; d];
        u[d - 1] = 1.0;
        let req = FlowRequest::first(u);
        let s = par_fill(PATHS, 2, || (), |_, i, row| {
            let b = simulate_bundle(&m, &x0, &BrownianPath::sample(d, grid, 500 + k as u64, i as u64), &req)?;
            row[0] = b.variation_bound_ratio(t.theta0);
            row[1] = b.state.terminal().iter().map(|v| v * v).sum();
            Ok(())
        })?;
        let ratios = s.column(0);
        let held = ratios.iter().filter(|r| **r <= slack).count();
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        let g0 = m.drift_vec(&vec![0.0; d]);
        let bound = t.second_moment_bound(PATH_HORIZON, 2.25, d, g0.iter().map(|v| v * v).sum());
        let m2 = s.column_mean_se(1);
        let ok = held == PATHS && m2.mean <= bound + Z * m2.se;
        pass &= ok;
        detail.push(format!("{name}: {held}/{PATHS} paths (max ratio {worst:.4}), E|X|^2 {:.3} <= {bound:.3}", m2.mean));
    }
    Ok((pass, detail.join("; ")))
}

fn weight_moments() -> Outcome {
    let (m, _) = make_linear_model(DMatrix::from_element(1, 1, 0.05))?;
    let r = bismut::moment_scaling(&m, &[1.0], &[1.0], &[1.0], &MOMENT_TS, &McConfig { replicas: MOMENT_REPLICAS, dt: MOMENT_DT, seed: 600 })?;
    let fits = [r.fit_i_u1.slope, r.fit_dv2_i_u1.slope, r.fit_i_u1_u2.slope];
    let mut pass = true;
    let mut detail = Vec::new();
    for ((name, target), slope) in experiments::WEIGHT_EXPONENTS.iter().zip(fits) {
        let ok = (slope - target).abs() <= experiments::WEIGHT_EXPONENT_TOL;
        pass &= ok;
        detail.push(format!("{name} {slope:.3} (target {target})"));
    }
    Ok((pass, detail.join(", ")))
}

fn ula_scaling() -> Outcome {
    let (m, t) = ou(1);
    let mut digits = true;
    for s in [0.2f64, 0.1, 0.05, 0.025] {
        let closed = ((1.0 / (1.0 - s / 2.0)).sqrt() - 1.0) * (2.0 / std::f64::consts::PI).sqrt();
        let v = experiments::ula_analytic_w1(&m, s)?.expect("scalar linear model");
        digits &= ((v - closed) / closed).abs() <= ULA_DIGITS_RTOL;
    }
    let r = experiments::ula_scaling(&m, &t, &UlaScalingConfig::default())?;
    let detail = std::iter::once(format!("analytic_4_digits={digits}"))
        .chain(r.checks.iter().map(|c| format!("{}={} ({})", c.name, c.pass, c.detail)))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((digits && r.pass(), detail))
}

fn rademacher_configurations(n: usize, d: usize) -> Vec<DMatrix<f64>> {
    (0..1usize << (n * d))
        .map(|bits| DMatrix::from_fn(n, d, |i, j| if bits >> (i * d + j) & 1 == 1 { 1.0 } else { -1.0 }))
        .collect()
}

fn clt_rate() -> Outcome {
    let r = experiments::clt_rate(&CltConfig::default())?;
    // Declared structure on random samples.
    let mut structure = true;
    for (k, n) in [8usize, 16, 32, 64, 128].into_iter().enumerate() {
        let b = pair::clt_pair_batch(pair::CltDistribution::Rademacher, n, 1, 200, 700 + k as u64)?;
        structure &= b.lambda() == 1.0 / n as f64;
        for i in 0..b.len() {
            structure &= b.r1(i).unwrap().iter().all(|v| *v == 0.0);
            structure &= b.r2_matrix(i).unwrap().iter().all(|v| *v == 0.0);
        }
    }
    // Enumeration over every Rademacher sample with n <= 3.
    let mut enumeration = true;
    let mut worst: f64 = 0.0;
    for (n, d) in [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)] {
        let support: Vec<Vec<f64>> = rademacher_configurations(1, d).iter().map(|m| m.row(0).iter().copied().collect()).collect();
        for x in rademacher_configurations(n, d) {
            let (m1, m2) = pair::clt_enumerate(&x, &support)?;
            let b = pair::clt_pair_all(&x, &x)?;
            let lam = b.lambda();
            let w = b.w(0);
            for j in 0..d {
                worst = worst.max((m1[j] + lam * w[j]).abs());
            }
            let declared = (DMatrix::identity(d, d) + b.r2_matrix(0).unwrap()) * (2.0 * lam);
            worst = worst.max((m2 - declared).abs().max());
        }
    }
    enumeration &= worst <= 1e-14;
    let detail = format!(
        "exponent {:.4} +- {:.4}; structure={structure}; enumeration max dev {worst:.1e}; {}",
        r.fit.exponent,
        r.fit.se,
        r.checks.iter().map(|c| format!("{}={}", c.name, c.pass)).collect::<Vec<_>>().join(" ")
    );
    Ok((r.pass() && structure && enumeration, detail))
}

fn contraction() -> Outcome {
    let (m, t) = ou(1);
    let c = contraction_constants(&m, &ContractionMode::Analytic)?;
    let exact = c.kappa.eval(1.0) == 2.0 && c.r0 == 0.0 && c.r1 == 2.0 && c.c == 0.5;
    let r = experiments::contraction_decay(&m, &t, &ContractionConfig::default())?;
    let detail = format!(
        "kappa={} R0={} R1={} c={}; decay rate {:.4} +- {:.4}; {}",
        c.kappa.eval(1.0),
        c.r0,
        c.r1,
        c.c,
        r.fit.exponent,
        r.fit.se,
        r.checks.iter().map(|c| format!("{}={}", c.name, c.pass)).collect::<Vec<_>>().join(" ")
    );
    Ok((exact && r.pass(), detail))
}

fn brute_force(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> f64 {
    let n = p.len();
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| p.point(i).iter().zip(q.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn exact_ot() -> Outcome {
    let mut r = rng::stream(900, 0);
    let mut measure = |n: usize, d: usize| {
        let pts: Vec<f64> = (0..n * d).map(|_| 4.0 * r.random::<f64>() - 2.0).collect();
        EmpiricalMeasure::uniform(d, pts)
    };
    let mut worst_bf: f64 = 0.0;
    for case in 0..200 {
        let (n, d) = (1 + case % 8, 1 + case % 3);
        let (p, q) = (measure(n, d)?, measure(n, d)?);
        let bf = brute_force(&p, &q);
        for solver in [OtSolver::NetworkSimplex, OtSolver::Assignment, OtSolver::Auto] {
            worst_bf = worst_bf.max((ot::w1_exact_with(&p, &q, solver)? - bf).abs() / bf.max(1.0));
        }
    }
    let mut worst_sorted: f64 = 0.0;
    for _ in 0..100 {
        let (p, q) = (measure(100, 1)?, measure(100, 1)?);
        let s = ot::w1_exact_with(&p, &q, OtSolver::Sorted)?;
        worst_sorted = worst_sorted.max((s - ot::w1_exact_with(&p, &q, OtSolver::NetworkSimplex)?).abs());
        worst_sorted = worst_sorted.max((s - ot::w1_exact_with(&p, &q, OtSolver::Assignment)?).abs());
    }
    Ok((
        worst_bf <= OT_TOL && worst_sorted <= OT_TOL,
        format!("200 brute-force instances max dev {worst_bf:.1e}; 100 sorted instances max dev {worst_sorted:.1e}"),
    ))
}

fn hessian_modulus() -> Outcome {
    let (m, t) = ou(1);
    let h = TestFunction::sin_coordinate(1, 0)?;
    let p = SteinProblem::new(m, t, h, TargetMean::exact(0.0))?;
    let cache = p.build_grad_cache(&cache_spec(MODULUS_DT, 1000))?;
    let cfg = SteinConfig { richardson: false, ..stein_cfg(MODULUS_REPLICAS, MODULUS_DT, 1001) };
    let q = [Quantity::Hess { u1: vec![1.0], u2: vec![1.0] }];
    let plugins = Plugins { f: None, grad: Some(&cache) };
    let x = ORACLE_POINT;
    // Common random numbers: every point uses the same seed, so replica i
    // sees the same Brownian path everywhere.
    let base = p.samples(&[x], &q, &cfg, plugins)?.column(0);
    let envelope = |eps: f64| eps * eps.ln().abs().max(1.0);
    let mut diffs = Vec::new();
    for &eps in &MODULUS_EPS {
        let shifted = p.samples(&[x + eps], &q, &cfg, plugins)?.column(0);
        let d: Vec<f64> = shifted.iter().zip(&base).map(|(a, b)| a - b).collect();
        let ms = stats::mean_se(&d);
        diffs.push((eps, ms.mean.abs(), ms.se));
    }
    let c = diffs[0].1 / envelope(diffs[0].0);
    let mut pass = true;
    let mut detail = vec![format!("C = {c:.4}")];
    for &(eps, v, se) in &diffs {
        let ok = v <= c * envelope(eps) + Z * se;
        pass &= ok;
        detail.push(format!("eps {eps}: {v:.4} <= {:.4} + 3*{se:.4}", c * envelope(eps)));
    }
    Ok((pass, detail.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("stein oracle agreement", oracle_agreement),
        ("stein residual", residuals),
        ("bismut identities", bismut_identities),
        ("per-path bounds", per_path_bounds),
        ("weight moment scaling", weight_moments),
        ("ula scaling", ula_scaling),
        ("clt rate", clt_rate),
        ("ergodic contraction", contraction),
        ("exact ot", exact_ot),
        ("hessian log-lipschitz modulus", hessian_modulus),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !selected.is_empty() && !selected.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {k:>2} {name} [{:.1}s]: {detail}", start.elapsed().as_secs_f64());
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
