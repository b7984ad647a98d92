use proptest::prelude::*;
use rand::RngExt;
use steinlab::ot::*;
use steinlab::rng;

fn brute_force(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> f64 {
    let n = p.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| p.point(i).iter().zip(q.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    };
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    best = best.min(cost(&perm));
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

fn random_measure(r: &mut rng::StreamRng, n: usize, d: usize) -> EmpiricalMeasure {
    let pts: Vec<f64> = (0..n * d).map(|_| 4.0 * r.random::<f64>() - 2.0).collect();
    EmpiricalMeasure::uniform(d, pts).unwrap()
}

#[test]
fn solvers_match_permutation_brute_force() {
    let mut r = rng::stream(11, 0);
    for case in 0..200 {
        let n = 1 + case % 8;
        let d = 1 + case % 3;
        let p = random_measure(&mut r, n, d);
        let q = random_measure(&mut r, n, d);
        let bf = brute_force(&p, &q);
        for solver in [OtSolver::Assignment, OtSolver::NetworkSimplex] {
            let v = w1_exact_with(&p, &q, solver).unwrap();
            assert!((v - bf).abs() <= 1e-12 * bf.max(1.0), "case {case} {solver:?}: {v} vs {bf}");
        }
    }
}

#[test]
fn sorted_coupling_matches_flow_solvers_in_one_dimension() {
    let mut r = rng::stream(12, 0);
    for case in 0..100 {
        let p = random_measure(&mut r, 100, 1);
        let q = random_measure(&mut r, 100, 1);
        let sorted = w1_exact_with(&p, &q, OtSolver::Sorted).unwrap();
        let flow = w1_exact_with(&p, &q, OtSolver::NetworkSimplex).unwrap();
        let assign = w1_exact_with(&p, &q, OtSolver::Assignment).unwrap();
        assert!((sorted - flow).abs() <= 1e-12, "case {case}: {sorted} vs {flow}");
        assert!((sorted - assign).abs() <= 1e-12, "case {case}: {sorted} vs {assign}");
    }
}

#[test]
fn unequal_sizes_match_replicated_assignment() {
    // P with m atoms and Q with n atoms, both uniform, equal an assignment
    // between lcm-size replicas.
    let mut r = rng::stream(13, 0);
    for (m, n) in [(2, 3), (3, 4), (4, 6), (5, 2), (6, 4)] {
        let d = 2;
        let p = random_measure(&mut r, m, d);
        let q = random_measure(&mut r, n, d);
        let l = (1..=m * n).find(|k| k % m == 0 && k % n == 0).unwrap();
        let rep = |mu: &EmpiricalMeasure, times: usize| {
            let pts: Vec<f64> = (0..mu.len()).flat_map(|i| std::iter::repeat_n(mu.point(i).to_vec(), times)).flatten().collect();
            EmpiricalMeasure::uniform(d, pts).unwrap()
        };
        let big = w1_exact_with(&rep(&p, l / m), &rep(&q, l / n), OtSolver::Assignment).unwrap();
        let flow = w1_exact_with(&p, &q, OtSolver::NetworkSimplex).unwrap();
        assert!((big - flow).abs() <= 1e-12, "{m}x{n}: {big} vs {flow}");
    }
}

#[test]
fn weighted_one_dimensional_measures_agree() {
    let mut r = rng::stream(14, 0);
    for _ in 0..50 {
        let m = 1 + r.random_range(0..12usize);
        let n = 1 + r.random_range(0..12usize);
        let mk = |r: &mut rng::StreamRng, k: usize| {
            let w: Vec<f64> = (0..k).map(|_| 0.1 + r.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            let mut w: Vec<f64> = w.iter().map(|v| v / s).collect();
            let rest: f64 = w[1..].iter().sum();
            w[0] = 1.0 - rest;
            EmpiricalMeasure::new(1, (0..k).map(|_| 3.0 * r.random::<f64>()).collect(), w).unwrap()
        };
        let p = mk(&mut r, m);
        let q = mk(&mut r, n);
        let a = w1_exact_with(&p, &q, OtSolver::Sorted).unwrap();
        let b = w1_exact_with(&p, &q, OtSolver::NetworkSimplex).unwrap();
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn spec_examples() {
    let p = EmpiricalMeasure::dirac(vec![0.0]).unwrap();
    let q = EmpiricalMeasure::dirac(vec![1.0]).unwrap();
    assert_eq!(w1_exact(&p, &q).unwrap(), 1.0);
    let lb = w1_lip_lower_bound(&p, &q, &[LipProbe::new("x", |x: &[f64]| x[0])]).unwrap();
    assert_eq!(lb.value, 1.0);
    let two = EmpiricalMeasure::uniform(1, vec![0.0, 2.0]).unwrap();
    assert!((w1_exact_with(&two, &q, OtSolver::NetworkSimplex).unwrap() - 1.0).abs() < 1e-15);
    let lb = w1_lip_lower_bound(&two, &two, &LipProbe::standard_set(1, &[vec![0.5]])).unwrap();
    assert_eq!(lb.value, 0.0);
}

#[test]
fn non_lipschitz_probe_is_rejected() {
    let p = EmpiricalMeasure::uniform(1, vec![0.0, 3.0]).unwrap();
    let q = EmpiricalMeasure::dirac(vec![1.0]).unwrap();
    assert!(w1_lip_lower_bound(&p, &q, &[LipProbe::new("2x", |x: &[f64]| 2.0 * x[0])]).is_err());
}

#[test]
fn network_simplex_handles_a_few_hundred_points() {
    let mut r = rng::stream(15, 0);
    let p = random_measure(&mut r, 300, 2);
    let q = random_measure(&mut r, 200, 2);
    let v = w1_exact_with(&p, &q, OtSolver::NetworkSimplex).unwrap();
    let lb = w1_lip_lower_bound(&p, &q, &LipProbe::standard_set(2, &[vec![0.0, 0.0], vec![1.0, -1.0]])).unwrap();
    assert!(lb.value <= v + 1e-12);
    let a = random_measure(&mut r, 300, 2);
    let flow = w1_exact_with(&p, &a, OtSolver::NetworkSimplex).unwrap();
    let assign = w1_exact_with(&p, &a, OtSolver::Assignment).unwrap();
    assert!((flow - assign).abs() <= 1e-12);
}

fn measure_strategy(max_n: usize, d: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..=max_n)
        .prop_map(move |pts| EmpiricalMeasure::uniform(d, pts.concat()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_translation_invariant(p in measure_strategy(7, 2), q in measure_strategy(7, 2), v in prop::collection::vec(-5.0f64..5.0, 2)) {
        let pq = w1_exact(&p, &q).unwrap();
        let qp = w1_exact(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() <= 1e-12 * pq.max(1.0));
        let shifted = w1_exact(&p.translated(&v).unwrap(), &q.translated(&v).unwrap()).unwrap();
        prop_assert!((pq - shifted).abs() <= 1e-11 * pq.max(1.0));
        prop_assert_eq!(w1_exact(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn triangle_inequality(p in measure_strategy(6, 2), q in measure_strategy(6, 2), s in measure_strategy(6, 2)) {
        let pq = w1_exact(&p, &q).unwrap();
        let qs = w1_exact(&q, &s).unwrap();
        let ps = w1_exact(&p, &s).unwrap();
        prop_assert!(ps <= pq + qs + 1e-12);
    }

    #[test]
    fn lipschitz_lower_bound_never_exceeds_exact(p in measure_strategy(8, 2), q in measure_strategy(8, 2)) {
        let centres: Vec<Vec<f64>> = (0..p.len()).map(|i| p.point(i).to_vec()).collect();
        let lb = w1_lip_lower_bound(&p, &q, &LipProbe::standard_set(2, &centres)).unwrap();
        prop_assert!(lb.value <= w1_exact(&p, &q).unwrap() + 1e-12);
    }
}
