//! Exact Wasserstein-1 distances between empirical measures, plus closed
//! forms used as references.
//!
//! Costs are Euclidean distances quantized to integers at `1e-12` of the
//! largest cost, so the combinatorial solvers terminate exactly; the reported
//! value re-evaluates the optimal plan with the unquantized costs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_dim, ensure_positive, Error, Result};

/// Largest number of points per measure accepted by the exact solvers.
pub const MAX_SUPPORT: usize = 5000;
const QUANT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `points` is flat `n x dim`; weights must be positive and sum to 1
    /// within `1e-12` (or the rounding error of summing them, if larger).
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidInput(format!("points must be a nonempty n x {dim} array")));
        }
        ensure_dim("weights", points.len() / dim, weights.len())?;
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12f64.max(weights.len() as f64 * f64::EPSILON) {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("points must be finite".into()));
        }
        Ok(Self { dim, points, weights })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidInput(format!("points must be a nonempty n x {dim} array")));
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        let d = point.len();
        Self::new(d, point, vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15)
    }

    /// The same measure shifted by `v`.
    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        ensure_dim("translation", self.dim, v.len())?;
        let points = self.points.chunks(self.dim).flat_map(|p| p.iter().zip(v).map(|(a, b)| a + b)).collect();
        Ok(Self { dim: self.dim, points, weights: self.weights.clone() })
    }

    pub fn mean_of(&self, h: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * h(self.point(i))).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtSolver {
    /// Monotone coupling for `d = 1`, network simplex otherwise. Equal-size
    /// uniform instances are assignment problems too, but the simplex solves
    /// them an order of magnitude faster than the Hungarian method at a few
    /// thousand points.
    Auto,
    Sorted,
    Assignment,
    NetworkSimplex,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn w1_exact(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    w1_exact_with(p, q, OtSolver::Auto)
}

pub fn w1_exact_with(p: &EmpiricalMeasure, q: &EmpiricalMeasure, solver: OtSolver) -> Result<f64> {
    ensure_dim("measure dimension", p.dim, q.dim)?;
    let uniform_square = p.len() == q.len() && p.is_uniform() && q.is_uniform();
    let solver = match solver {
        OtSolver::Auto if p.dim == 1 => OtSolver::Sorted,
        OtSolver::Auto => OtSolver::NetworkSimplex,
        s => s,
    };
    match solver {
        OtSolver::Sorted => w1_sorted(p, q),
        OtSolver::Assignment => {
            if !uniform_square {
                return Err(Error::InvalidInput("assignment needs two uniform measures of equal size".into()));
            }
            check_cap(p, q)?;
            let perm = assignment(p, q);
            Ok(perm.iter().enumerate().map(|(i, &j)| dist(p.point(i), q.point(j))).sum::<f64>() / p.len() as f64)
        }
        OtSolver::NetworkSimplex => {
            check_cap(p, q)?;
            network_simplex(p, q)
        }
        OtSolver::Auto => unreachable!(),
    }
}

fn check_cap(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<()> {
    let n = p.len().max(q.len());
    if n > MAX_SUPPORT {
        return Err(Error::InvalidInput(format!("exact OT is capped at {MAX_SUPPORT} points per measure (got {n})")));
    }
    Ok(())
}

/// `d = 1`: equal-size uniform measures use the mean gap of the sorted
/// samples, anything else integrates `|F_P - F_Q|`.
fn w1_sorted(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    if p.dim != 1 {
        return Err(Error::Unsupported("the sorted coupling needs d = 1".into()));
    }
    if p.len() == q.len() && p.is_uniform() && q.is_uniform() {
        let mut a = p.points.clone();
        let mut b = q.points.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let mut atoms: Vec<(f64, f64)> = p.points.iter().zip(&p.weights).map(|(x, w)| (*x, *w)).collect();
    atoms.extend(q.points.iter().zip(&q.weights).map(|(x, w)| (*x, -*w)));
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf = 0.0;
    let mut total = 0.0;
    for k in 0..atoms.len() - 1 {
        cdf += atoms[k].1;
        total += cdf.abs() * (atoms[k + 1].0 - atoms[k].0);
    }
    Ok(total)
}

fn quantizer(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> f64 {
    // Bound the largest cost by the bounding-box diagonal.
    let d = p.dim;
    let mut diag = 0.0;
    for j in 0..d {
        let vals = p.points.iter().skip(j).step_by(d).chain(q.points.iter().skip(j).step_by(d));
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        diag += (hi - lo) * (hi - lo);
    }
    let cmax = diag.sqrt();
    if cmax > 0.0 {
        1.0 / (cmax * QUANT)
    } else {
        1.0
    }
}

/// Optimal permutation for uniform equal-size measures (Hungarian method with
/// potentials, integer costs). Returns `perm[i]` = column matched to row `i`.
fn assignment(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Vec<usize> {
    let n = p.len();
    let scale = quantizer(p, q);
    let cost = |i: usize, j: usize| (dist(p.point(i), q.point(j)) * scale).round() as i64;
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![INF; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = INF);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

const NONE: usize = usize::MAX;

/// Primal network simplex on the transportation network with a strongly
/// feasible spanning tree (Cunningham's leaving-arc rule) and block pricing.
///
/// Nodes are the `m` sources, the `n` sinks and an artificial root. Arcs
/// `0..m n` are `source i -> sink j`; the artificial arcs `i -> root` and
/// `root -> sink j` form the initial tree. All arcs are uncapacitated, so
/// only tree arcs carry flow; it is stored per tree arc.
struct Simplex<'a> {
    p: &'a EmpiricalMeasure,
    q: &'a EmpiricalMeasure,
    m: usize,
    n: usize,
    scale: f64,
    art_cost: i64,
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// The tree arc `pred[x]` points from `x` to its parent.
    up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<i64>,
    flow: HashMap<usize, f64>,
    adj: Vec<Vec<(usize, usize)>>,
}

impl<'a> Simplex<'a> {
    fn root(&self) -> usize {
        self.m + self.n
    }

    fn arcs(&self) -> usize {
        self.m * self.n + self.m + self.n
    }

    fn ends(&self, a: usize) -> (usize, usize) {
        let mn = self.m * self.n;
        if a < mn {
            (a / self.n, self.m + a % self.n)
        } else if a < mn + self.m {
            (a - mn, self.root())
        } else {
            (self.root(), self.m + (a - mn - self.m))
        }
    }

    fn cost(&self, a: usize) -> i64 {
        if a < self.m * self.n {
            (dist(self.p.point(a / self.n), self.q.point(a % self.n)) * self.scale).round() as i64
        } else {
            self.art_cost
        }
    }

    fn reduced(&self, a: usize) -> i64 {
        let (s, t) = self.ends(a);
        self.cost(a) + self.pi[s] - self.pi[t]
    }

    fn new(p: &'a EmpiricalMeasure, q: &'a EmpiricalMeasure) -> Self {
        let (m, n) = (p.len(), q.len());
        let scale = quantizer(p, q);
        let nodes = m + n + 1;
        let cmax = (1.0 / QUANT).round() as i64 + 1;
        let art_cost = cmax * nodes as i64;
        let mut s = Simplex {
            p,
            q,
            m,
            n,
            scale,
            art_cost,
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            up: vec![false; nodes],
            depth: vec![0; nodes],
            pi: vec![0; nodes],
            flow: HashMap::with_capacity(2 * nodes),
            adj: vec![Vec::new(); nodes],
        };
        let root = s.root();
        let mn = m * n;
        for i in 0..m {
            let a = mn + i;
            s.parent[i] = root;
            s.pred[i] = a;
            s.up[i] = true;
            s.depth[i] = 1;
            s.pi[i] = -art_cost;
            s.flow.insert(a, p.weights[i]);
            s.adj[i].push((root, a));
            s.adj[root].push((i, a));
        }
        for j in 0..n {
            let a = mn + m + j;
            let x = m + j;
            s.parent[x] = root;
            s.pred[x] = a;
            s.up[x] = false;
            s.depth[x] = 1;
            s.pi[x] = art_cost;
            s.flow.insert(a, q.weights[j]);
            s.adj[x].push((root, a));
            s.adj[root].push((x, a));
        }
        s
    }

    fn join(&self, mut a: usize, mut b: usize) -> usize {
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        a
    }

    fn pivot(&mut self, entering: usize) -> Result<()> {
        let (first, second) = self.ends(entering);
        let join = self.join(first, second);
        let mut delta = f64::INFINITY;
        let mut out = NONE;
        let mut side = 0;
        let mut x = first;
        while x != join {
            if self.up[x] {
                let f = self.flow[&self.pred[x]];
                if f < delta {
                    delta = f;
                    out = x;
                    side = 1;
                }
            }
            x = self.parent[x];
        }
        x = second;
        while x != join {
            if !self.up[x] {
                let f = self.flow[&self.pred[x]];
                if f <= delta {
                    delta = f;
                    out = x;
                    side = 2;
                }
            }
            x = self.parent[x];
        }
        if side == 0 {
            return Err(Error::InvalidInput("transport problem is unbounded".into()));
        }
        if delta > 0.0 {
            x = first;
            while x != join {
                let f = self.flow.get_mut(&self.pred[x]).expect("tree arc");
                if self.up[x] {
                    *f -= delta;
                } else {
                    *f += delta;
                }
                x = self.parent[x];
            }
            x = second;
            while x != join {
                let f = self.flow.get_mut(&self.pred[x]).expect("tree arc");
                if self.up[x] {
                    *f += delta;
                } else {
                    *f -= delta;
                }
                x = self.parent[x];
            }
        }
        // Swap the leaving arc for the entering one and re-hang the cut subtree.
        let leaving = self.pred[out];
        let op = self.parent[out];
        self.flow.remove(&leaving);
        self.adj[out].retain(|&(_, a)| a != leaving);
        self.adj[op].retain(|&(_, a)| a != leaving);
        self.flow.insert(entering, delta);
        let (u_in, v_in) = if side == 1 { (first, second) } else { (second, first) };
        self.adj[u_in].push((v_in, entering));
        self.adj[v_in].push((u_in, entering));
        self.hang(u_in, v_in, entering);
        Ok(())
    }

    fn hang(&mut self, start: usize, parent: usize, arc: usize) {
        let mut stack = vec![(start, parent, arc)];
        while let Some((x, px, a)) = stack.pop() {
            self.parent[x] = px;
            self.pred[x] = a;
            let (s, _) = self.ends(a);
            self.up[x] = s == x;
            self.depth[x] = self.depth[px] + 1;
            let c = self.cost(a);
            self.pi[x] = if self.up[x] { self.pi[px] - c } else { self.pi[px] + c };
            for &(y, b) in &self.adj[x] {
                if y != px {
                    stack.push((y, x, b));
                }
            }
        }
    }

    fn solve(&mut self) -> Result<f64> {
        let total = self.arcs();
        let block = ((total as f64).sqrt() as usize).max(10).min(total);
        let mut next = 0usize;
        loop {
            let mut best = 0i64;
            let mut best_arc = NONE;
            let mut scanned = 0usize;
            let mut in_block = 0usize;
            while scanned < total {
                let a = next;
                next = if next + 1 == total { 0 } else { next + 1 };
                scanned += 1;
                in_block += 1;
                let rc = self.reduced(a);
                if rc < best {
                    best = rc;
                    best_arc = a;
                }
                if in_block == block {
                    if best_arc != NONE {
                        break;
                    }
                    in_block = 0;
                }
            }
            if best_arc == NONE {
                break;
            }
            self.pivot(best_arc)?;
        }
        let mn = self.m * self.n;
        let mut cost = 0.0;
        let mut art = 0.0;
        for (&a, &f) in &self.flow {
            if a < mn {
                cost += f * dist(self.p.point(a / self.n), self.q.point(a % self.n));
            } else {
                art += f;
            }
        }
        if art > 1e-9 {
            return Err(Error::InvalidInput(format!("weights are not balanced: {art:e} mass left on artificial arcs")));
        }
        Ok(cost)
    }
}

fn network_simplex(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<f64> {
    Simplex::new(p, q).solve()
}

/// `E|Z_d| = sqrt 2 Gamma((d+1)/2) / Gamma(d/2)`.
pub fn chi_mean(d: usize) -> f64 {
    let d = d as f64;
    2f64.sqrt() * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// `W1(N(0, s1^2 I_d), N(0, s2^2 I_d)) = |s1 - s2| E|Z_d|`.
pub fn w1_gaussian_isotropic(sigma1: f64, sigma2: f64, d: usize) -> Result<f64> {
    ensure_positive("sigma1", sigma1)?;
    ensure_positive("sigma2", sigma2)?;
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    Ok((sigma1 - sigma2).abs() * chi_mean(d))
}

/// `E|mu + sigma Z|` for standard normal `Z` (folded normal mean).
pub fn folded_normal_mean(mu: f64, sigma: f64) -> f64 {
    let sigma = sigma.abs();
    if sigma == 0.0 {
        return mu.abs();
    }
    let n = Normal::standard();
    let z = mu / sigma;
    sigma * 2.0 * n.pdf(z) + mu * (1.0 - 2.0 * n.cdf(-z))
}

/// `W1(N(m1, s1^2), N(m2, s2^2))` in one dimension: the quantile coupling
/// gives `E|(m1 - m2) + (s1 - s2) Z|`.
pub fn w1_normal_1d(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    folded_normal_mean(m1 - m2, s1 - s2)
}

/// `W1(delta_x, N(m, s^2))` in one dimension.
pub fn w1_dirac_normal(x: f64, m: f64, s: f64) -> f64 {
    folded_normal_mean(x - m, s)
}

/// `W1` between a discrete law on the line and `N(m, s^2)`, by exact
/// integration of `|F - Phi((x - m)/s)|` between atoms.
pub fn w1_discrete_normal_1d(points: &[f64], weights: &[f64], m: f64, s: f64) -> Result<f64> {
    ensure_dim("weights", points.len(), weights.len())?;
    ensure_positive("s", s)?;
    if points.is_empty() {
        return Err(Error::InvalidInput("need at least one atom".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative and sum to 1".into()));
    }
    let n = Normal::standard();
    // Antiderivative of Phi((x - m)/s).
    let big_g = |x: f64| {
        let z = (x - m) / s;
        (x - m) * n.cdf(z) + s * n.pdf(z)
    };
    let mut atoms: Vec<(f64, f64)> = points.iter().copied().zip(weights.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    // |Phi - q| on [a, b], split where Phi crosses q.
    let seg = |a: f64, b: f64, q: f64| -> f64 {
        let signed = |a: f64, b: f64| big_g(b) - big_g(a) - q * (b - a);
        if q <= 0.0 {
            return signed(a, b);
        }
        if q >= 1.0 {
            return -signed(a, b);
        }
        let xs = m + s * n.inverse_cdf(q);
        if xs <= a {
            signed(a, b)
        } else if xs >= b {
            -signed(a, b)
        } else {
            -signed(a, xs) + signed(xs, b)
        }
    };
    let first = atoms[0].0;
    let last = atoms[atoms.len() - 1].0;
    let mut total = big_g(first);
    let mut cdf = 0.0;
    for k in 0..atoms.len() - 1 {
        cdf += atoms[k].1;
        if atoms[k + 1].0 > atoms[k].0 {
            total += seg(atoms[k].0, atoms[k + 1].0, cdf);
        }
    }
    // Upper tail: E[(X - last)^+].
    let z = (last - m) / s;
    total += s * n.pdf(z) - (last - m) * (1.0 - n.cdf(z));
    Ok(total)
}

/// A named test function claimed to be 1-Lipschitz.
pub struct LipProbe {
    pub name: String,
    pub f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl LipProbe {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Box::new(f) }
    }

    /// Coordinate projections and `|x - c|` for each support point `c` of a
    /// small reference set.
    pub fn standard_set(dim: usize, centres: &[Vec<f64>]) -> Vec<LipProbe> {
        let mut out = Vec::new();
        for j in 0..dim {
            out.push(LipProbe::new(format!("x{j}"), move |x: &[f64]| x[j]));
        }
        for (k, c) in centres.iter().enumerate() {
            let c = c.clone();
            out.push(LipProbe::new(format!("dist{k}"), move |x: &[f64]| dist(x, &c)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipBound {
    pub value: f64,
    pub best_probe: String,
}

const LIP_CHECK_POINTS: usize = 2000;

/// `max_h |E_P h - E_Q h|` over the probes; a lower bound on `W1(P, Q)`.
/// Each probe is checked to be 1-Lipschitz on the combined support (or an
/// evenly strided subset of 2000 points).
pub fn w1_lip_lower_bound(p: &EmpiricalMeasure, q: &EmpiricalMeasure, probes: &[LipProbe]) -> Result<LipBound> {
    ensure_dim("measure dimension", p.dim, q.dim)?;
    if probes.is_empty() {
        return Err(Error::InvalidInput("need at least one probe".into()));
    }
    let pts: Vec<&[f64]> = (0..p.len()).map(|i| p.point(i)).chain((0..q.len()).map(|i| q.point(i))).collect();
    let stride = pts.len().div_ceil(LIP_CHECK_POINTS).max(1);
    let check: Vec<&[f64]> = pts.iter().step_by(stride).copied().collect();
    let mut best = LipBound { value: 0.0, best_probe: probes[0].name.clone() };
    for probe in probes {
        let vals: Vec<f64> = check.iter().map(|x| (probe.f)(x)).collect();
        for a in 0..check.len() {
            for b in a + 1..check.len() {
                let dx = dist(check[a], check[b]);
                if (vals[a] - vals[b]).abs() > dx * (1.0 + 1e-12) + 1e-15 {
                    return Err(Error::InvalidInput(format!("probe `{}` is not 1-Lipschitz on the sample", probe.name)));
                }
            }
        }
        let gap = (p.mean_of(&probe.f) - q.mean_of(&probe.f)).abs();
        if gap > best.value {
            best = LipBound { value: gap, best_probe: probe.name.clone() };
        }
    }
    Ok(best)
}
