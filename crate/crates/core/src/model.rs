//! Drift models `g` for the Langevin SDE `dX = g(X) dt + sqrt(2) dB`, the
//! dissipativity parameters they are declared with, and numerical probes of
//! those declarations.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_positive, Error, Result};
use crate::rng;

/// Derivative actions supplied by a custom drift.
pub trait DriftFunctions: Send + Sync {
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// `out = (grad g)(x) u`.
    fn jacobian_action(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `out = (grad^2 g)(x)[u1, u2]`.
    fn hessian_action(&self, x: &[f64], u1: &[f64], u2: &[f64], out: &mut [f64]);
}

#[derive(Clone)]
pub enum DriftKind {
    Linear(DMatrix<f64>),
    Power { c: f64, p: f64 },
    Custom { name: String, functions: Arc<dyn DriftFunctions> },
}

impl fmt::Debug for DriftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftKind::Linear(a) => f.debug_tuple("Linear").field(a).finish(),
            DriftKind::Power { c, p } => f.debug_struct("Power").field("c", c).field("p", p).finish(),
            DriftKind::Custom { name, .. } => f.debug_struct("Custom").field("name", name).finish(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DriftModel {
    dim: usize,
    kind: DriftKind,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec_neg(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..d {
            s += a[(i, j)] * x[j];
        }
        *o = -s;
    }
}

impl DriftModel {
    pub fn custom(name: impl Into<String>, dim: usize, functions: Arc<dyn DriftFunctions>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        Ok(Self { dim, kind: DriftKind::Custom { name: name.into(), functions } })
    }

    /// `g = 0`. Has no valid dissipativity parameters; meant for tests of the
    /// stochastic machinery in the pure-diffusion case.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            kind: DriftKind::Custom { name: "zero".into(), functions: Arc::new(ZeroDrift) },
        }
    }

    /// `g(x) = -c |x|^p x`, which violates the uniform dissipativity
    /// condition near the origin for `p > 0`.
    pub fn counterexample(c: f64, p: f64, dim: usize) -> Result<Self> {
        ensure_positive("c", c)?;
        if !(p >= 1.0) {
            return Err(Error::OutOfRange {
                name: "p",
                value: p,
                constraint: "counterexample drift needs p >= 1 to be C^1".into(),
            });
        }
        Self::custom(format!("counterexample(c={c},p={p})"), dim, Arc::new(Counterexample { c, p }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DriftKind::Linear(_) => "linear".into(),
            DriftKind::Power { c, p } => format!("power(c={c},p={p})"),
            DriftKind::Custom { name, .. } => name.clone(),
        }
    }

    /// True when the Hessian action is identically zero, letting callers skip
    /// the second-variation and Malliavin flows.
    pub fn hessian_vanishes(&self) -> bool {
        match &self.kind {
            DriftKind::Linear(_) => true,
            DriftKind::Power { p, .. } => *p == 0.0,
            DriftKind::Custom { .. } => false,
        }
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Linear(a) => mat_vec_neg(a, x, out),
            DriftKind::Power { c, p } => {
                let s = -c * (1.0 + dot(x, x)).powf(0.5 * p);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = s * xi;
                }
            }
            DriftKind::Custom { functions, .. } => functions.drift(x, out),
        }
    }

    pub fn jacobian_action(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Linear(a) => mat_vec_neg(a, u, out),
            DriftKind::Power { c, p } => {
                let q = 1.0 + dot(x, x);
                let a = -c * q.powf(0.5 * p);
                let b = -c * p * q.powf(0.5 * p - 1.0) * dot(x, u);
                for i in 0..out.len() {
                    out[i] = a * u[i] + b * x[i];
                }
            }
            DriftKind::Custom { functions, .. } => functions.jacobian_action(x, u, out),
        }
    }

    pub fn hessian_action(&self, x: &[f64], u1: &[f64], u2: &[f64], out: &mut [f64]) {
        match &self.kind {
            DriftKind::Linear(_) => out.iter_mut().for_each(|o| *o = 0.0),
            DriftKind::Power { c, p } => {
                let q = 1.0 + dot(x, x);
                let a = -c * p * q.powf(0.5 * p - 1.0);
                let b = -c * p * (p - 2.0) * q.powf(0.5 * p - 2.0);
                let (xu1, xu2, u12) = (dot(x, u1), dot(x, u2), dot(u1, u2));
                for i in 0..out.len() {
                    out[i] = a * (xu1 * u2[i] + xu2 * u1[i] + u12 * x[i]) + b * xu1 * xu2 * x[i];
                }
            }
            DriftKind::Custom { functions, .. } => functions.hessian_action(x, u1, u2, out),
        }
    }

    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift(x, &mut out);
        out
    }

    pub fn jacobian_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.jacobian_action(x, u, &mut out);
        out
    }

    pub fn hessian_vec(&self, x: &[f64], u1: &[f64], u2: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.hessian_action(x, u1, u2, &mut out);
        out
    }
}

struct ZeroDrift;

impl DriftFunctions for ZeroDrift {
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn jacobian_action(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn hessian_action(&self, _x: &[f64], _u1: &[f64], _u2: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

struct Counterexample {
    c: f64,
    p: f64,
}

impl DriftFunctions for Counterexample {
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let s = -self.c * norm(x).powf(self.p);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = s * xi;
        }
    }

    fn jacobian_action(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let r = norm(x);
        if r == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let (c, p) = (self.c, self.p);
        let a = -c * r.powf(p);
        let b = -c * p * r.powf(p - 2.0) * dot(x, u);
        for i in 0..out.len() {
            out[i] = a * u[i] + b * x[i];
        }
    }

    fn hessian_action(&self, x: &[f64], u1: &[f64], u2: &[f64], out: &mut [f64]) {
        let r = norm(x);
        if r == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let (c, p) = (self.c, self.p);
        let a = -c * p * r.powf(p - 2.0);
        let b = -c * p * (p - 2.0) * r.powf(p - 4.0);
        let (xu1, xu2, u12) = (dot(x, u1), dot(x, u2), dot(u1, u2));
        for i in 0..out.len() {
            out[i] = a * (xu1 * u2[i] + xu2 * u1[i] + u12 * x[i]) + b * xu1 * xu2 * x[i];
        }
    }
}

/// Declared constants of the dissipativity assumption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta4: f64,
}

impl ThetaParams {
    pub fn new(theta0: f64, theta1: f64, theta2: f64, theta3: f64, theta4: f64) -> Result<Self> {
        ensure_positive("theta0", theta0)?;
        ensure_positive("theta4", theta4)?;
        for (name, v) in [("theta1", theta1), ("theta2", theta2), ("theta3", theta3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::OutOfRange { name, value: v, constraint: "must be >= 0".into() });
            }
        }
        Ok(Self { theta0, theta1, theta2, theta3, theta4 })
    }

    /// Right side of the second-moment bound
    /// `E|X_t|^2 <= e^{-theta0 t}|x|^2 + (2d + |g(0)|^2/theta0)/theta0`.
    pub fn second_moment_bound(&self, t: f64, x_norm_sq: f64, d: usize, g0_norm_sq: f64) -> f64 {
        (-self.theta0 * t).exp() * x_norm_sq + (2.0 * d as f64 + g0_norm_sq / self.theta0) / self.theta0
    }
}

fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn make_linear_model(a: DMatrix<f64>) -> Result<(DriftModel, ThetaParams)> {
    let d = a.nrows();
    if d == 0 || a.ncols() != d {
        return Err(Error::InvalidInput(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("A has non-finite entries".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "A is not symmetric: A[{i},{j}] = {} but A[{j},{i}] = {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    let ev = symmetric_eigenvalues(&a);
    let (lo, hi) = (ev[0], ev[d - 1]);
    if !(lo > 0.0) {
        return Err(Error::InvalidInput(format!("A must be positive definite; smallest eigenvalue is {lo}")));
    }
    let theta = ThetaParams::new(lo, 0.0, 1.0, 1.0, hi)?;
    Ok((DriftModel { dim: d, kind: DriftKind::Linear(a) }, theta))
}

/// Grid evidence behind the shipped power-model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerCertificate {
    pub radius_max: f64,
    pub radial_points: usize,
    pub direction_points: usize,
    /// Grid minimum of `-<u, grad_u g> / ((1 + theta1 |x|^theta2)|u|^2)`.
    pub a2_min_ratio: f64,
    /// Grid maximum of `|hess g[u1,u2]| / ((1 + theta1 |x|)^(theta2-1)|u1||u2|)`.
    pub a3_max_ratio: f64,
    /// Grid maximum of `|g(x)| / (1 + |x|^(1+theta2))`.
    pub a1b_max_ratio: f64,
}

const CERT_RADIUS: f64 = 10.0;
const CERT_RADIAL: usize = 4001;
const CERT_ANGLES: usize = 48;
const CERT_MARGIN: f64 = 1.05;

pub fn make_power_model(c: f64, p: f64, d: usize) -> Result<(DriftModel, ThetaParams)> {
    let (m, t, _) = make_power_model_certified(c, p, d)?;
    Ok((m, t))
}

pub fn make_power_model_certified(c: f64, p: f64, d: usize) -> Result<(DriftModel, ThetaParams, PowerCertificate)> {
    ensure_positive("c", c)?;
    if !(p.is_finite() && p >= 0.0) {
        return Err(Error::OutOfRange { name: "p", value: p, constraint: "must be >= 0".into() });
    }
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    let model = DriftModel { dim: d, kind: DriftKind::Power { c, p } };
    let (theta1, theta2) = if p == 0.0 { (0.0, 1.0) } else { (1.0, p) };

    // Work in the plane spanned by x and one orthogonal direction; the
    // drift is radially symmetric so this covers every configuration.
    let pd = d.min(2);
    let plane = DriftModel { dim: pd, kind: DriftKind::Power { c, p } };
    let angles: Vec<Vec<f64>> = if pd == 1 {
        vec![vec![1.0]]
    } else {
        (0..CERT_ANGLES)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / CERT_ANGLES as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    };
    let mut a2_min = f64::INFINITY;
    let mut a3_max = 0.0f64;
    let mut a1b_max = 0.0f64;
    let mut x = vec![0.0; pd];
    for k in 0..CERT_RADIAL {
        let r = CERT_RADIUS * k as f64 / (CERT_RADIAL - 1) as f64;
        x[0] = r;
        let w2 = 1.0 + theta1 * r.powf(theta2);
        let w3 = (1.0 + theta1 * r).powf(theta2 - 1.0);
        // Bilinear in (u1, u2): tabulate the basis actions once per radius.
        let basis: Vec<Vec<f64>> = (0..pd * pd)
            .map(|ij| {
                let (mut ei, mut ej) = (vec![0.0; pd], vec![0.0; pd]);
                ei[ij / pd] = 1.0;
                ej[ij % pd] = 1.0;
                plane.hessian_vec(&x, &ei, &ej)
            })
            .collect();
        let mut h = vec![0.0; pd];
        for u1 in &angles {
            let j = plane.jacobian_vec(&x, u1);
            a2_min = a2_min.min(-dot(u1, &j) / w2);
            for u2 in &angles {
                h.iter_mut().for_each(|v| *v = 0.0);
                for (ij, b) in basis.iter().enumerate() {
                    let w = u1[ij / pd] * u2[ij % pd];
                    for (hv, bv) in h.iter_mut().zip(b) {
                        *hv += w * bv;
                    }
                }
                a3_max = a3_max.max(norm(&h) / w3);
            }
        }
        a1b_max = a1b_max.max(norm(&plane.drift_vec(&x)) / (1.0 + r.powf(1.0 + theta2)));
    }
    // Beyond the grid the a2 ratio tends to c and the a1b ratio to c.
    let theta0 = if p >= 2.0 || p == 0.0 {
        // (1+r^2)^{p/2} >= 1 + r^p for p >= 2: the minimum c is attained at r = 0.
        c
    } else {
        a2_min.min(c) * (1.0 - 1e-6)
    };
    let theta3 = if a3_max > 0.0 { CERT_MARGIN * a3_max } else { 1.0 };
    let theta4 = CERT_MARGIN * a1b_max.max(c);
    let theta = ThetaParams::new(theta0, theta1, theta2, theta3, theta4)?;
    let cert = PowerCertificate {
        radius_max: CERT_RADIUS,
        radial_points: CERT_RADIAL,
        direction_points: angles.len(),
        a2_min_ratio: a2_min,
        a3_max_ratio: a3_max,
        a1b_max_ratio: a1b_max,
    };
    Ok((model, theta, cert))
}

/// One probe point: a location and three nonzero directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSlack {
    pub a2: f64,
    pub a3: f64,
    /// Integrated dissipativity `<x, g(x) - g(0)> <= -theta0(|x|^2 + ...)`.
    pub a1a: f64,
    pub a1b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub slacks: Vec<ProbeSlack>,
    pub worst_a2: f64,
    pub worst_a3: f64,
    pub worst_a1a: f64,
    pub worst_a1b: f64,
    /// Index of the probe with the smallest (a2) slack.
    pub worst_a2_probe: usize,
    pub pass: bool,
}

pub const PROBE_TOLERANCE: f64 = 1e-9;

pub fn probe_assumption(model: &DriftModel, theta: &ThetaParams, probes: &[Probe]) -> Result<ProbeReport> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("probe list is empty".into()));
    }
    let d = model.dim();
    let g0 = model.drift_vec(&vec![0.0; d]);
    let mut slacks = Vec::with_capacity(probes.len());
    let mut pass = true;
    for pr in probes {
        for (what, v) in [("x", &pr.x), ("u", &pr.u), ("u1", &pr.u1), ("u2", &pr.u2)] {
            ensure_dim(what, d, v.len())?;
        }
        if norm(&pr.u) == 0.0 || norm(&pr.u1) == 0.0 || norm(&pr.u2) == 0.0 {
            return Err(Error::InvalidInput("probe directions must be nonzero".into()));
        }
        let r = norm(&pr.x);
        let uu = dot(&pr.u, &pr.u);
        let lhs2 = dot(&pr.u, &model.jacobian_vec(&pr.x, &pr.u));
        let rhs2 = -theta.theta0 * (1.0 + theta.theta1 * r.powf(theta.theta2)) * uu;
        let a2 = rhs2 - lhs2;
        let lhs3 = norm(&model.hessian_vec(&pr.x, &pr.u1, &pr.u2));
        let rhs3 = theta.theta3 * (1.0 + theta.theta1 * r).powf(theta.theta2 - 1.0) * norm(&pr.u1) * norm(&pr.u2);
        let a3 = rhs3 - lhs3;
        let gx = model.drift_vec(&pr.x);
        let diff: Vec<f64> = gx.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let a1a = -theta.theta0 * (r * r + theta.theta1 * r.powf(2.0 + theta.theta2) / (1.0 + theta.theta2))
            - dot(&pr.x, &diff);
        let a1b = theta.theta4 * (1.0 + r.powf(1.0 + theta.theta2)) - norm(&gx);
        let tol2 = PROBE_TOLERANCE * lhs2.abs().max(rhs2.abs()).max(1.0);
        let tol3 = PROBE_TOLERANCE * lhs3.max(rhs3).max(1.0);
        if a2 < -tol2 || a3 < -tol3 || !a2.is_finite() || !a3.is_finite() {
            pass = false;
        }
        slacks.push(ProbeSlack { a2, a3, a1a, a1b });
    }
    let worst = |f: fn(&ProbeSlack) -> f64| slacks.iter().map(f).fold(f64::INFINITY, f64::min);
    let worst_a2_probe = slacks
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.a2.total_cmp(&b.1.a2))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(ProbeReport {
        worst_a2: worst(|s| s.a2),
        worst_a3: worst(|s| s.a3),
        worst_a1a: worst(|s| s.a1a),
        worst_a1b: worst(|s| s.a1b),
        worst_a2_probe,
        slacks,
        pass,
    })
}

fn random_unit(rng: &mut rng::StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Probe grid: `radii` radial shells (including the origin) up to `radius`,
/// `per_shell` random locations on each, random unit directions, plus the
/// radial direction as `u` on every other probe.
pub fn default_probe_grid(d: usize, radius: f64, radii: usize, per_shell: usize, seed: u64) -> Vec<Probe> {
    let mut rng = rng::stream(seed, 0x9e0b);
    let mut out = Vec::with_capacity(radii.max(1) * per_shell.max(1));
    for k in 0..radii.max(1) {
        let r = if radii <= 1 { 0.0 } else { radius * k as f64 / (radii - 1) as f64 };
        for j in 0..per_shell.max(1) {
            let dir = random_unit(&mut rng, d);
            let x: Vec<f64> = dir.iter().map(|v| r * v).collect();
            let u = if j % 2 == 0 { dir.clone() } else { random_unit(&mut rng, d) };
            let u1 = random_unit(&mut rng, d);
            let u2 = if j % 3 == 0 { dir.clone() } else { random_unit(&mut rng, d) };
            out.push(Probe { x, u, u1, u2 });
        }
    }
    out
}

/// `kappa(r)` as either an exact constant or a sampled profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KappaProfile {
    Constant(f64),
    /// Sample minima at sorted radii; these upper-bound the true infimum.
    Sampled { radii: Vec<f64>, values: Vec<f64> },
}

impl KappaProfile {
    /// Piecewise-linear in r between sampled radii, flat outside.
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            KappaProfile::Constant(k) => *k,
            KappaProfile::Sampled { radii, values } => {
                if r <= radii[0] {
                    return values[0];
                }
                for i in 1..radii.len() {
                    if r <= radii[i] {
                        let w = (r - radii[i - 1]) / (radii[i] - radii[i - 1]);
                        return (1.0 - w) * values[i - 1] + w * values[i];
                    }
                }
                *values.last().unwrap()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub r0: f64,
    pub r1: f64,
    pub c: f64,
    pub kappa: KappaProfile,
}

impl ContractionConstants {
    /// `d_W(L(X_t^x), mu) <= 2 e^{-ct} d_W(delta_x, mu)`: the factor in front
    /// of the initial distance.
    pub fn decay_factor(&self, t: f64) -> f64 {
        2.0 * (-self.c * t).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaProbe {
    pub radii: Vec<f64>,
    pub pairs_per_radius: usize,
    /// Pair midpoints are drawn uniformly from the ball of this radius.
    pub center_radius: f64,
    pub seed: u64,
}

impl Default for KappaProbe {
    fn default() -> Self {
        let radii = (1..=40).map(|k| 0.25 * k as f64).collect();
        Self { radii, pairs_per_radius: 10_000, center_radius: 5.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContractionMode {
    Analytic,
    Probed(KappaProbe),
}

fn constants_from_constant_kappa(kappa: f64) -> ContractionConstants {
    let r1 = (8.0 / kappa).sqrt();
    ContractionConstants { r0: 0.0, r1, c: 2.0 / (r1 * r1), kappa: KappaProfile::Constant(kappa) }
}

pub fn contraction_constants(model: &DriftModel, mode: &ContractionMode) -> Result<ContractionConstants> {
    match mode {
        ContractionMode::Analytic => match model.kind() {
            DriftKind::Linear(a) => Ok(constants_from_constant_kappa(2.0 * symmetric_eigenvalues(a)[0])),
            _ => Err(Error::Unsupported("analytic contraction constants need a linear model".into())),
        },
        ContractionMode::Probed(probe) => probed_constants(model, probe),
    }
}

fn probed_constants(model: &DriftModel, probe: &KappaProbe) -> Result<ContractionConstants> {
    let mut radii = probe.radii.clone();
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || probe.pairs_per_radius == 0 {
        return Err(Error::InvalidInput("kappa probe needs positive radii and at least one pair".into()));
    }
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let d = model.dim();
    let mut values = Vec::with_capacity(radii.len());
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    for (i, &r) in radii.iter().enumerate() {
        let mut rng = rng::stream(probe.seed, i as u64);
        let mut kmin = f64::INFINITY;
        for _ in 0..probe.pairs_per_radius {
            let dir = random_unit(&mut rng, d);
            let mid_dir = random_unit(&mut rng, d);
            let u: f64 = rand::RngExt::random(&mut rng);
            let rad = probe.center_radius * u.powf(1.0 / d as f64);
            let half = std::f64::consts::SQRT_2 * r / 2.0;
            let x: Vec<f64> = (0..d).map(|k| rad * mid_dir[k] + half * dir[k]).collect();
            let y: Vec<f64> = (0..d).map(|k| rad * mid_dir[k] - half * dir[k]).collect();
            model.drift(&x, &mut gx);
            model.drift(&y, &mut gy);
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..d {
                num += (x[k] - y[k]) * (gx[k] - gy[k]);
                den += (x[k] - y[k]) * (x[k] - y[k]);
            }
            kmin = kmin.min(-2.0 * num / den);
        }
        if !(kmin > 0.0) {
            return Err(Error::ContractionUndefined(format!("sampled kappa({r}) = {kmin} is not positive")));
        }
        values.push(kmin);
    }
    // Suffix minima: K(R) = min_{r >= R} kappa(r) over the grid.
    let mut suffix = values.clone();
    for i in (0..suffix.len().saturating_sub(1)).rev() {
        suffix[i] = suffix[i].min(suffix[i + 1]);
    }
    let r0 = 0.0;
    let mut r1 = None;
    for i in 0..radii.len() {
        let lo = if i == 0 { 0.0 } else { radii[i - 1] };
        // On (radii[i-1], radii[i]] use the suffix minimum from node i.
        let k = suffix[i];
        let cand = lo.max((8.0 / k).sqrt()).max(r0);
        if cand <= radii[i] || i + 1 == radii.len() {
            r1 = Some(cand);
            break;
        }
    }
    let r1 = r1.expect("radius grid is non-empty");
    Ok(ContractionConstants { r0, r1, c: 2.0 / (r1 * r1), kappa: KappaProfile::Sampled { radii, values } })
}

/// Serializable model description consumed by configuration front ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Linear { a: Vec<Vec<f64>> },
    Power { c: f64, p: f64, d: usize },
    /// `g(x) = -c|x|^p x` with declared (not certified) parameters.
    Counterexample { c: f64, p: f64, d: usize, theta: ThetaParams },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Linear { a } => a.len(),
            ModelSpec::Power { d, .. } | ModelSpec::Counterexample { d, .. } => *d,
        }
    }

    pub fn build(&self) -> Result<(DriftModel, ThetaParams)> {
        match self {
            ModelSpec::Linear { a } => {
                let d = a.len();
                if a.iter().any(|row| row.len() != d) {
                    return Err(Error::InvalidInput("matrix A must be square".into()));
                }
                make_linear_model(DMatrix::from_fn(d, d, |i, j| a[i][j]))
            }
            ModelSpec::Power { c, p, d } => make_power_model(*c, *p, *d),
            ModelSpec::Counterexample { c, p, d, theta } => Ok((DriftModel::counterexample(*c, *p, *d)?, *theta)),
        }
    }
}
