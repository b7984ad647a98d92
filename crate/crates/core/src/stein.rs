//! Monte Carlo solutions of the Stein equation
//! `Laplacian f + <g, grad f> = h - mu(h)` and their derivatives.
//!
//! Every estimator integrates a per-path functional in time on the path grid.
//! Value and first-derivative integrands are bounded and use the trapezoid
//! rule. Integrands that carry a Bismut weight behave like `t^{-1/2}` in
//! variance near zero; they are integrated in `tau = sqrt(t)` on `(0, 1]`
//! and by the trapezoid rule on `[1, T]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::functions::TestFunction;
use crate::model::{
    contraction_constants, default_probe_grid, probe_assumption, ContractionConstants, ContractionMode, DriftKind,
    DriftModel, KappaProbe, ProbeReport, ThetaParams,
};
use crate::paths::{dot, hessian_forcing_into, integrate_linear_into, norm, simulate_state_into, LinearScratch};
use crate::quadrature;
use crate::rng;
use crate::stats::{self, par_fill, MeanSe, SampleMatrix};

pub trait ScalarField: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    /// Bound on the pointwise error of `value` (zero for exact fields).
    fn error(&self) -> f64 {
        0.0
    }
}

pub trait VectorField: Send + Sync {
    fn value(&self, x: &[f64], out: &mut [f64]);
    /// Bound on the Euclidean pointwise error of `value`.
    fn error(&self) -> f64 {
        0.0
    }
}

/// An exactly known scalar field.
pub struct ExactScalar<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ScalarField for ExactScalar<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// An exactly known vector field.
pub struct ExactVector<F>(pub F);

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> VectorField for ExactVector<F> {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        (self.0)(x, out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TargetMeanMethod {
    /// Independent chains after a burn-in of `10/theta0`; the SE comes from
    /// the spread of the chain means.
    ErgodicAverage { time_per_chain: f64, dt: f64, chains: usize, seed: u64 },
    /// Linear models only: tensor Gauss-Hermite against `N(0, A^{-1})`.
    GaussQuadrature { nodes: usize },
    /// One-dimensional models: the density `exp(-U)`, `U' = -g`, on a fine grid.
    DensityQuadrature { intervals: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMean {
    pub value: f64,
    pub method: String,
    pub error_estimate: f64,
}

impl TargetMean {
    pub fn exact(value: f64) -> Self {
        Self { value, method: "exact".into(), error_estimate: 0.0 }
    }
}

pub fn target_mean(model: &DriftModel, theta: &ThetaParams, h: &TestFunction, method: &TargetMeanMethod) -> Result<TargetMean> {
    ensure_dim("test function", model.dim(), h.dim())?;
    target_mean_of(model, theta, |x| h.eval(x), method)
}

fn target_mean_of(
    model: &DriftModel,
    theta: &ThetaParams,
    h: impl Fn(&[f64]) -> f64 + Sync,
    method: &TargetMeanMethod,
) -> Result<TargetMean> {
    let d = model.dim();
    match method {
        TargetMeanMethod::GaussQuadrature { nodes } => {
            let a = match model.kind() {
                DriftKind::Linear(a) => a,
                _ => return Err(Error::Unsupported("Gauss quadrature for the target mean needs a linear model".into())),
            };
            if *nodes < 20 {
                return Err(Error::OutOfRange { name: "nodes", value: *nodes as f64, constraint: "need at least 20 nodes per axis".into() });
            }
            let cov = a.clone().try_inverse().ok_or_else(|| Error::InvalidInput("A is singular".into()))?;
            let l = cov.cholesky().ok_or_else(|| Error::InvalidInput("A^{-1} is not positive definite".into()))?.l();
            let mut x = vec![0.0; d];
            let eval = |nodes: usize, x: &mut Vec<f64>| {
                quadrature::gauss_hermite_expectation(d, nodes, |z| {
                    for i in 0..d {
                        x[i] = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                    }
                    h(x)
                })
            };
            let v = eval(*nodes, &mut x)?;
            let coarse = eval((*nodes / 2).max(10), &mut x)?;
            Ok(TargetMean { value: v, method: "gauss_quadrature".into(), error_estimate: (v - coarse).abs() })
        }
        TargetMeanMethod::DensityQuadrature { intervals } => {
            if d != 1 {
                return Err(Error::Unsupported("density quadrature for the target mean needs d = 1".into()));
            }
            if *intervals < 1000 {
                return Err(Error::OutOfRange { name: "intervals", value: *intervals as f64, constraint: "need at least 1000 intervals".into() });
            }
            let fine = density_mean(model, &h, *intervals);
            let coarse = density_mean(model, &h, *intervals / 2);
            Ok(TargetMean { value: fine, method: "density_quadrature".into(), error_estimate: (fine - coarse).abs() })
        }
        TargetMeanMethod::ErgodicAverage { time_per_chain, dt, chains, seed } => {
            if *chains < 2 {
                return Err(Error::InvalidInput("ergodic average needs at least two chains".into()));
            }
            crate::error::ensure_positive("dt", *dt)?;
            crate::error::ensure_positive("time_per_chain", *time_per_chain)?;
            let burn = (10.0 / theta.theta0 / dt).ceil() as usize;
            let steps = (time_per_chain / dt).ceil() as usize;
            let means = par_fill(*chains, 1, || (), |_, c, row| {
                let mut r = rng::stream(*seed, c as u64);
                let mut x = vec![0.0; d];
                let mut g = vec![0.0; d];
                let sd = (2.0 * dt).sqrt();
                let mut acc = 0.0;
                for k in 0..burn + steps {
                    model.drift(&x, &mut g);
                    for i in 0..d {
                        x[i] += g[i] * dt + sd * rng::normal(&mut r);
                    }
                    if !(norm(&x) < crate::paths::DIVERGENCE_THRESHOLD) {
                        return Err(Error::Divergence { step: k + 1, norm: norm(&x) });
                    }
                    if k >= burn {
                        acc += h(&x);
                    }
                }
                row[0] = acc / steps as f64;
                Ok(())
            })?;
            let s = means.column_mean_se(0);
            Ok(TargetMean { value: s.mean, method: "ergodic_average".into(), error_estimate: s.se })
        }
    }
}

/// `int h e^{-U} / int e^{-U}` by Simpson's rule on a window where `U`
/// rises by at least 60 above its minimum.
fn density_mean(model: &DriftModel, h: &impl Fn(&[f64]) -> f64, intervals: usize) -> f64 {
    let neg_g = |x: f64| -model.drift_vec(&[x])[0];
    // Walk outwards until the potential has risen enough on both sides.
    let potential_at = |x: f64| quadrature::integrate(|y| neg_g(y), 0.0, x, 1e-10);
    let mut lo = -1.0;
    while potential_at(lo) < 60.0 && lo > -1e4 {
        lo *= 1.5;
    }
    let mut hi = 1.0;
    while potential_at(hi) < 60.0 && hi < 1e4 {
        hi *= 1.5;
    }
    let n = intervals + intervals % 2;
    let step = (hi - lo) / n as f64;
    // Cumulative potential by the trapezoid rule on a grid 4x finer.
    let mut u = vec![0.0; n + 1];
    let sub = 4;
    let hs = step / sub as f64;
    for k in 1..=n {
        let a = lo + (k - 1) as f64 * step;
        let mut s = 0.0;
        for j in 0..sub {
            let y0 = a + j as f64 * hs;
            s += 0.5 * hs * (neg_g(y0) + neg_g(y0 + hs));
        }
        u[k] = u[k - 1] + s;
    }
    let umin = u.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        let p = (-(u[k] - umin)).exp();
        num += w * p * h(&[lo + k as f64 * step]);
        den += w * p;
    }
    num / den
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinConfig {
    pub horizon: f64,
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Martingale control variates for the value estimator.
    pub control_variates: bool,
    /// Control variates `sum phi(X_k) <grad_u X_k, dB_k>` for the gradient.
    /// They remove nearly all variance for polynomial `h`, which leaves the
    /// O(dt) bias larger than the reported error; caches always use them.
    #[serde(default)]
    pub gradient_control_variates: bool,
    /// Report `2 f(dt) - f(2 dt)` for the value, both on the same noise. The
    /// Euler chain's invariant law is off by O(dt), which the time integral
    /// turns into an O(T dt) bias in `f`; the combination cancels it.
    #[serde(default)]
    pub richardson: bool,
}

/// What to estimate at a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "quantity", rename_all = "snake_case")]
pub enum Quantity {
    /// `f(x) = -int_0^T E[h(X_t) - mu(h)] dt`.
    Value,
    /// `grad_u f(x) = -int_0^T E<grad h(X_t), grad_u X_t> dt`.
    Grad { u: Vec<f64> },
    /// `grad_u f(x) = int e^{-t} E[(f - h + mu(h))(X_t) I_u(t)] dt` with a plug-in `f`.
    GradResolvent { u: Vec<f64> },
    /// `grad_{u2} grad_{u1} f(x)` from the resolvent form with a plug-in `grad f`.
    Hess { u1: Vec<f64>, u2: Vec<f64> },
    /// `f(x) = int e^{-t} E[(f + mu(h) - h)(X_t)] dt` with a plug-in `f`.
    ValueResolvent,
}

impl Quantity {
    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Value => "f",
            Quantity::Grad { .. } => "grad_f",
            Quantity::GradResolvent { .. } => "grad_f_resolvent",
            Quantity::Hess { .. } => "hess_f",
            Quantity::ValueResolvent => "f_resolvent",
        }
    }

    fn directions(&self) -> Vec<Vec<f64>> {
        match self {
            Quantity::Value | Quantity::ValueResolvent => vec![],
            Quantity::Grad { u } | Quantity::GradResolvent { u } => vec![u.clone()],
            Quantity::Hess { u1, u2 } => vec![u1.clone(), u2.clone()],
        }
    }
}

#[derive(Clone, Copy, Default)]
pub struct Plugins<'a> {
    pub f: Option<&'a dyn ScalarField>,
    pub grad: Option<&'a dyn VectorField>,
}

/// JSON record `{point, directions, value, se, tail, horizon, replicas, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinEstimate {
    pub quantity: String,
    pub point: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub value: f64,
    /// Monte Carlo and plug-in errors combined in quadrature.
    pub std_error: f64,
    pub mc_error: f64,
    pub plugin_error: f64,
    /// Bound on the discarded mass beyond the horizon; infinite when the
    /// test function has no global Lipschitz bound. Not included in `value`.
    pub truncation_tail: f64,
    pub horizon: f64,
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
}

/// Per-replica values of each requested quantity.
#[derive(Clone, Debug)]
pub struct QuantitySamples {
    pub values: SampleMatrix,
    /// Column of `values` holding each quantity.
    pub columns: Vec<usize>,
    /// Control-variate columns for each quantity (empty when unused).
    pub controls: Vec<Vec<usize>>,
    /// Per-quantity column with the absolute weight mass that multiplies a
    /// plug-in error, when the quantity uses a plug-in.
    pub plugin_mass: Vec<Option<usize>>,
}

impl QuantitySamples {
    pub fn mean_se(&self, q: usize) -> MeanSe {
        if self.controls[q].is_empty() {
            self.values.column_mean_se(self.columns[q])
        } else {
            self.values.controlled_mean_se(self.columns[q], &self.controls[q])
        }
    }

    pub fn column(&self, q: usize) -> Vec<f64> {
        self.values.column(self.columns[q])
    }
}

/// Time weights for the trapezoid rule on nodes `0..=m`.
fn trapezoid_weights(m: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; m + 1];
    w[0] = 0.5 * dt;
    w[m] = 0.5 * dt;
    w
}

/// Weights for integrands whose mean is bounded but whose variance grows
/// like `1/t` near zero. On `(0, min(1, T)]` the rule is the trapezoid rule
/// in `tau = sqrt(t)` over the grid nodes with at least four steps, with the
/// `tau`-integrand taken as zero at `tau = 0`; beyond `t = 1` it is the plain
/// trapezoid rule.
pub fn singular_weights(m: usize, dt: f64) -> Vec<f64> {
    let t = |k: usize| k as f64 * dt;
    let first = crate::bismut::MIN_WEIGHT_STEPS;
    let knee = ((1.0 / dt).round() as usize).clamp(first, m);
    let mut w = vec![0.0; m + 1];
    let tau = |k: usize| t(k).sqrt();
    for k in first..=knee {
        let left = if k == first { 0.0 } else { tau(k - 1) };
        let right = if k == knee { tau(k) } else { tau(k + 1) };
        // d t = 2 tau d tau.
        w[k] += 0.5 * (right - left) * 2.0 * tau(k);
    }
    for k in knee..m {
        w[k] += 0.5 * dt;
        w[k + 1] += 0.5 * dt;
    }
    w
}

/// Monte Carlo solver for one `(model, h)` pair with a shared target mean.
#[derive(Clone, Debug)]
pub struct SteinProblem {
    model: DriftModel,
    theta: ThetaParams,
    contraction: ContractionConstants,
    h: TestFunction,
    mu: TargetMean,
    probe: ProbeReport,
}

impl SteinProblem {
    /// Probes the dissipativity assumption and computes the contraction
    /// constants (analytic for linear drifts, sampled otherwise).
    pub fn new(model: DriftModel, theta: ThetaParams, h: TestFunction, mu: TargetMean) -> Result<Self> {
        let mode = match model.kind() {
            DriftKind::Linear(_) => ContractionMode::Analytic,
            _ => ContractionMode::Probed(KappaProbe::default()),
        };
        let contraction = contraction_constants(&model, &mode)?;
        Self::with_contraction(model, theta, h, mu, contraction)
    }

    pub fn with_contraction(
        model: DriftModel,
        theta: ThetaParams,
        h: TestFunction,
        mu: TargetMean,
        contraction: ContractionConstants,
    ) -> Result<Self> {
        ensure_dim("test function", model.dim(), h.dim())?;
        let probes = default_probe_grid(model.dim(), 10.0, 21, 16, 0);
        let probe = probe_assumption(&model, &theta, &probes)?;
        if !probe.pass {
            return Err(Error::AssumptionViolated(format!(
                "dissipativity probe failed (worst a2 slack {:e}, worst a3 slack {:e})",
                probe.worst_a2, probe.worst_a3
            )));
        }
        Ok(Self { model, theta, contraction, h, mu, probe })
    }

    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn theta(&self) -> &ThetaParams {
        &self.theta
    }

    pub fn contraction(&self) -> &ContractionConstants {
        &self.contraction
    }

    pub fn test_function(&self) -> &TestFunction {
        &self.h
    }

    pub fn target_mean(&self) -> &TargetMean {
        &self.mu
    }

    pub fn probe_report(&self) -> &ProbeReport {
        &self.probe
    }

    /// Smallest horizon accepted by the estimators: `5 / c`.
    pub fn min_horizon(&self) -> f64 {
        5.0 / self.contraction.c
    }

    fn check_config(&self, x: &[f64], cfg: &SteinConfig) -> Result<usize> {
        ensure_dim("point", self.model.dim(), x.len())?;
        crate::error::ensure_positive("dt", cfg.dt)?;
        let need = self.min_horizon();
        if cfg.horizon < need * (1.0 - 1e-12) {
            return Err(Error::HorizonTooSmall { horizon: cfg.horizon, required: need });
        }
        if cfg.replicas < 2 {
            return Err(Error::InvalidInput("need at least two replicas".into()));
        }
        let m = (cfg.horizon / cfg.dt).round() as usize;
        if ((m as f64) * cfg.dt - cfg.horizon).abs() > 1e-9 * cfg.horizon {
            return Err(Error::InvalidInput(format!("dt = {} does not divide the horizon {}", cfg.dt, cfg.horizon)));
        }
        if cfg.richardson && m % 2 != 0 {
            return Err(Error::InvalidInput(format!("Richardson extrapolation needs an even step count (got {m})")));
        }
        Ok(m)
    }

    /// Per-replica samples of several quantities from one set of paths.
    pub fn samples(&self, x: &[f64], quantities: &[Quantity], cfg: &SteinConfig, plugins: Plugins<'_>) -> Result<QuantitySamples> {
        let m = self.check_config(x, cfg)?;
        let d = self.model.dim();
        // Unique variation directions.
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        let mut dir_index = |u: &Vec<f64>| -> Result<usize> {
            ensure_dim("direction", d, u.len())?;
            if let Some(i) = dirs.iter().position(|v| v == u) {
                return Ok(i);
            }
            dirs.push(u.clone());
            Ok(dirs.len() - 1)
        };
        enum Slot {
            Value { controls: usize },
            Grad { dir: usize, controls: usize },
            GradRes(usize),
            Hess(usize, usize),
            ValueRes,
        }
        let nbasis = if d == 1 { 4 } else { d + 1 };
        let nbasis_grad = if d == 1 { 3 } else { d + 1 };
        let mut slots = Vec::new();
        let mut columns = Vec::new();
        let mut controls = Vec::new();
        let mut plugin_mass = Vec::new();
        let mut ncols = 0usize;
        for q in quantities {
            columns.push(ncols);
            ncols += 1;
            let mut ctrl = Vec::new();
            let mut mass = None;
            let slot = match q {
                Quantity::Value => {
                    if cfg.control_variates {
                        ctrl = (ncols..ncols + nbasis * d).collect();
                        ncols += nbasis * d;
                    }
                    Slot::Value { controls: ctrl.len() }
                }
                Quantity::Grad { u } => {
                    if cfg.gradient_control_variates {
                        ctrl = (ncols..ncols + nbasis_grad).collect();
                        ncols += nbasis_grad;
                    }
                    Slot::Grad { dir: dir_index(u)?, controls: ctrl.len() }
                }
                Quantity::GradResolvent { u } => {
                    if plugins.f.is_none() {
                        return Err(Error::InvalidInput("resolvent gradient needs an f plug-in".into()));
                    }
                    mass = Some(ncols);
                    ncols += 1;
                    Slot::GradRes(dir_index(u)?)
                }
                Quantity::Hess { u1, u2 } => {
                    if plugins.grad.is_none() {
                        return Err(Error::InvalidInput("Hessian estimator needs a grad f plug-in".into()));
                    }
                    mass = Some(ncols);
                    ncols += 1;
                    Slot::Hess(dir_index(u1)?, dir_index(u2)?)
                }
                Quantity::ValueResolvent => {
                    if plugins.f.is_none() {
                        return Err(Error::InvalidInput("resolvent value needs an f plug-in".into()));
                    }
                    Slot::ValueRes
                }
            };
            slots.push(slot);
            controls.push(ctrl);
            plugin_mass.push(mass);
        }
        let nonlinear = !self.model.hessian_vanishes();
        let hess_pairs: Vec<(usize, usize)> = slots
            .iter()
            .filter_map(|s| if let Slot::Hess(a, b) = s { Some((*a, *b)) } else { None })
            .collect();
        let dt = cfg.dt;
        let wt = trapezoid_weights(m, dt);
        let coarse = cfg.richardson && slots.iter().any(|s| matches!(s, Slot::Value { .. }));
        let wt2 = if coarse { trapezoid_weights(m / 2, 2.0 * dt) } else { Vec::new() };
        let ws = singular_weights(m, dt);
        let decay: Vec<f64> = (0..=m).map(|k| (-(k as f64) * dt).exp()).collect();
        let mu = self.mu.value;
        let model = &self.model;
        let h = &self.h;
        let s2 = std::f64::consts::SQRT_2;

        struct Work {
            noise: Vec<f64>,
            state: Vec<f64>,
            var1: Vec<Vec<f64>>,
            ito: Vec<Vec<f64>>,
            var12: Vec<Vec<f64>>,
            mal: Vec<Vec<f64>>,
            forcing: Vec<f64>,
            lin: LinearScratch,
            g: Vec<f64>,
            gh: Vec<f64>,
            gp: Vec<f64>,
            coarse_noise: Vec<f64>,
            coarse_state: Vec<f64>,
        }
        let nd = dirs.len();
        let npairs = hess_pairs.len();
        let init = || Work {
            noise: vec![0.0; m * d],
            state: vec![0.0; (m + 1) * d],
            var1: vec![vec![0.0; (m + 1) * d]; nd],
            ito: vec![vec![0.0; m + 1]; nd],
            var12: vec![vec![0.0; (m + 1) * d]; if nonlinear { npairs } else { 0 }],
            mal: vec![vec![0.0; (m + 1) * d]; if nonlinear { npairs } else { 0 }],
            forcing: vec![0.0; (m + 1) * d],
            lin: LinearScratch::new(d),
            g: vec![0.0; d],
            gh: vec![0.0; d],
            gp: vec![0.0; d],
            coarse_noise: vec![0.0; if coarse { m / 2 * d } else { 0 }],
            coarse_state: vec![0.0; if coarse { (m / 2 + 1) * d } else { 0 }],
        };
        let values = par_fill(cfg.replicas, ncols, init, |w, rep, row| {
            let mut r = rng::stream(cfg.seed, rep as u64);
            rng::fill_normal(&mut r, &mut w.noise, dt.sqrt());
            simulate_state_into(model, x, dt, &w.noise, &mut w.state, &mut w.g)?;
            for (j, u) in dirs.iter().enumerate() {
                integrate_linear_into(model, &w.state, dt, u, None, &mut w.var1[j], &mut w.lin)?;
                let (v, s) = (&w.var1[j], &mut w.ito[j]);
                s[0] = 0.0;
                for k in 0..m {
                    s[k + 1] = s[k] + dot(&v[k * d..(k + 1) * d], &w.noise[k * d..(k + 1) * d]);
                }
            }
            if nonlinear {
                let zero = vec![0.0; d];
                for (p, &(a, b)) in hess_pairs.iter().enumerate() {
                    hessian_forcing_into(model, &w.state, &w.var1[b], &w.var1[a], |_| 1.0, &mut w.forcing);
                    integrate_linear_into(model, &w.state, dt, &zero, Some(&w.forcing), &mut w.var12[p], &mut w.lin)?;
                    // Forcing weight s: the flow for horizon t is this path divided by t.
                    hessian_forcing_into(model, &w.state, &w.var1[b], &w.var1[a], |k| k as f64 * dt, &mut w.forcing);
                    integrate_linear_into(model, &w.state, dt, &zero, Some(&w.forcing), &mut w.mal[p], &mut w.lin)?;
                }
            }
            row.iter_mut().for_each(|v| *v = 0.0);
            if coarse {
                for k in 0..m / 2 {
                    for j in 0..d {
                        w.coarse_noise[k * d + j] = w.noise[2 * k * d + j] + w.noise[(2 * k + 1) * d + j];
                    }
                }
                simulate_state_into(model, x, 2.0 * dt, &w.coarse_noise, &mut w.coarse_state, &mut w.g)?;
                let mut part = 0.0;
                for k in 0..=m / 2 {
                    part += wt2[k] * (h.eval(&w.coarse_state[k * d..(k + 1) * d]) - mu);
                }
                for (qi, slot) in slots.iter().enumerate() {
                    if let Slot::Value { .. } = slot {
                        row[columns[qi]] += part;
                    }
                }
            }
            for k in 0..=m {
                let xk = &w.state[k * d..(k + 1) * d];
                let t = k as f64 * dt;
                let hx = h.eval(xk);
                h.grad(xk, &mut w.gh);
                let fp = plugins.f.map(|f| f.value(xk));
                if let Some(gp) = plugins.grad {
                    gp.value(xk, &mut w.gp);
                }
                let mut pair = 0usize;
                for (qi, slot) in slots.iter().enumerate() {
                    let c = columns[qi];
                    match slot {
                        Slot::Value { controls: nc } => {
                            row[c] -= if coarse { 2.0 } else { 1.0 } * wt[k] * (hx - mu);
                            if *nc > 0 && k < m {
                                let db = &w.noise[k * d..(k + 1) * d];
                                let mut col = c + 1;
                                for l in 0..d {
                                    for b in 0..nbasis {
                                        let phi = if d == 1 { xk[0].powi(b as i32) } else if b == 0 { 1.0 } else { xk[b - 1] };
                                        row[col] += phi * db[l];
                                        col += 1;
                                    }
                                }
                            }
                        }
                        Slot::Grad { dir, controls: nc } => {
                            let v = &w.var1[*dir][k * d..(k + 1) * d];
                            row[c] -= wt[k] * dot(&w.gh, v);
                            if *nc > 0 && k < m {
                                let vdb = dot(v, &w.noise[k * d..(k + 1) * d]);
                                for b in 0..*nc {
                                    let phi = if d == 1 { xk[0].powi(b as i32) } else if b == 0 { 1.0 } else { xk[b - 1] };
                                    row[c + 1 + b] += phi * vdb;
                                }
                            }
                        }
                        Slot::ValueRes => {
                            row[c] += wt[k] * decay[k] * (fp.expect("checked") + mu - hx);
                        }
                        Slot::GradRes(j) => {
                            if ws[k] > 0.0 {
                                let weight = w.ito[*j][k] / (s2 * t);
                                let psi = fp.expect("checked") - hx + mu;
                                row[c] += ws[k] * decay[k] * psi * weight;
                                row[plugin_mass[qi].expect("set")] += ws[k] * decay[k] * weight.abs();
                            }
                        }
                        Slot::Hess(a, b) => {
                            if ws[k] > 0.0 {
                                let v1 = &w.var1[*a][k * d..(k + 1) * d];
                                let weight = w.ito[*b][k] / (s2 * t);
                                let mut lead = 0.0;
                                let mut corr = 0.0;
                                let mut corr_norm = 0.0;
                                for i in 0..d {
                                    let gpsi = w.gp[i] - w.gh[i];
                                    lead += gpsi * v1[i];
                                    if nonlinear {
                                        let z = w.var12[pair][k * d + i] - w.mal[pair][k * d + i] / t;
                                        corr += gpsi * z;
                                        corr_norm += z * z;
                                    }
                                }
                                row[c] += ws[k] * decay[k] * (lead * weight + corr);
                                row[plugin_mass[qi].expect("set")] +=
                                    ws[k] * decay[k] * (norm(v1) * weight.abs() + corr_norm.sqrt());
                            }
                            pair += 1;
                        }
                    }
                }
            }
            Ok(())
        })?;
        Ok(QuantitySamples { values, columns, controls, plugin_mass })
    }

    /// Estimates for several quantities from one set of paths.
    pub fn estimate_many(&self, x: &[f64], quantities: &[Quantity], cfg: &SteinConfig, plugins: Plugins<'_>) -> Result<Vec<SteinEstimate>> {
        let s = self.samples(x, quantities, cfg, plugins)?;
        Ok(quantities
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let est = s.mean_se(qi);
                let plugin_error = match q {
                    Quantity::ValueResolvent => plugins.f.map_or(0.0, |f| f.error()) * (1.0 - (-cfg.horizon).exp()),
                    Quantity::GradResolvent { .. } => {
                        plugins.f.map_or(0.0, |f| f.error()) * stats::mean(&s.values.column(s.plugin_mass[qi].unwrap()))
                    }
                    Quantity::Hess { .. } => {
                        plugins.grad.map_or(0.0, |g| g.error()) * stats::mean(&s.values.column(s.plugin_mass[qi].unwrap()))
                    }
                    _ => 0.0,
                };
                SteinEstimate {
                    quantity: q.name().into(),
                    point: x.to_vec(),
                    directions: q.directions(),
                    value: est.mean,
                    std_error: stats::pooled_se(est.se, plugin_error),
                    mc_error: est.se,
                    plugin_error,
                    truncation_tail: self.truncation_tail(q, x, cfg.horizon),
                    horizon: cfg.horizon,
                    dt: cfg.dt,
                    replicas: cfg.replicas,
                    seed: cfg.seed,
                }
            })
            .collect())
    }

    fn one(&self, x: &[f64], q: Quantity, cfg: &SteinConfig, plugins: Plugins<'_>) -> Result<SteinEstimate> {
        Ok(self.estimate_many(x, &[q], cfg, plugins)?.remove(0))
    }

    pub fn estimate_f(&self, x: &[f64], cfg: &SteinConfig) -> Result<SteinEstimate> {
        self.one(x, Quantity::Value, cfg, Plugins::default())
    }

    pub fn estimate_grad_f(&self, x: &[f64], u: &[f64], cfg: &SteinConfig) -> Result<SteinEstimate> {
        self.one(x, Quantity::Grad { u: u.to_vec() }, cfg, Plugins::default())
    }

    pub fn estimate_grad_f_resolvent(&self, x: &[f64], u: &[f64], cfg: &SteinConfig, f_plugin: &dyn ScalarField) -> Result<SteinEstimate> {
        self.one(x, Quantity::GradResolvent { u: u.to_vec() }, cfg, Plugins { f: Some(f_plugin), grad: None })
    }

    pub fn estimate_hess_f(
        &self,
        x: &[f64],
        u1: &[f64],
        u2: &[f64],
        cfg: &SteinConfig,
        grad_plugin: &dyn VectorField,
    ) -> Result<SteinEstimate> {
        self.one(x, Quantity::Hess { u1: u1.to_vec(), u2: u2.to_vec() }, cfg, Plugins { f: None, grad: Some(grad_plugin) })
    }

    /// Right side of the resolvent identity for `f` with a plug-in `f`.
    pub fn resolvent_f(&self, x: &[f64], cfg: &SteinConfig, f_plugin: &dyn ScalarField) -> Result<SteinEstimate> {
        self.one(x, Quantity::ValueResolvent, cfg, Plugins { f: Some(f_plugin), grad: None })
    }

    /// `Laplacian f + <g, grad f> - (h - mu(h))` at `x`, all derivative
    /// estimates taken from one set of paths.
    pub fn stein_residual(&self, x: &[f64], cfg: &SteinConfig, grad_plugin: &dyn VectorField) -> Result<Residual> {
        let d = self.model.dim();
        if d > 3 {
            return Err(Error::Unsupported("residuals are limited to d <= 3".into()));
        }
        let mut qs = Vec::new();
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            qs.push(Quantity::Grad { u: e.clone() });
            qs.push(Quantity::Hess { u1: e.clone(), u2: e });
        }
        let plugins = Plugins { f: None, grad: Some(grad_plugin) };
        let s = self.samples(x, &qs, cfg, plugins)?;
        let g = self.model.drift_vec(x);
        let mut combo = Vec::new();
        for i in 0..d {
            combo.push((s.columns[2 * i], g[i]));
            combo.push((s.columns[2 * i + 1], 1.0));
        }
        let est = s.values.combination_mean_se(&combo);
        let plugin_error: f64 = (0..d)
            .map(|i| grad_plugin.error() * stats::mean(&s.values.column(s.plugin_mass[2 * i + 1].unwrap())))
            .sum();
        let rhs = self.h.eval(x) - self.mu.value;
        let se = (est.se.powi(2) + plugin_error.powi(2) + self.mu.error_estimate.powi(2)).sqrt();
        let tail: f64 = qs.iter().map(|q| self.truncation_tail(q, x, cfg.horizon) * if matches!(q, Quantity::Grad { .. }) { norm(&g).max(1.0) } else { 1.0 }).sum();
        let residual = est.mean - rhs;
        Ok(Residual {
            point: x.to_vec(),
            residual,
            se,
            mc_error: est.se,
            plugin_error,
            truncation_tail: tail,
            pass: residual.abs() <= 3.0 * se,
        })
    }

    fn second_moment_bound(&self) -> f64 {
        let d = self.model.dim();
        let g0 = self.model.drift_vec(&vec![0.0; d]);
        (2.0 * d as f64 + dot(&g0, &g0) / self.theta.theta0) / self.theta.theta0
    }

    /// Tail bounds beyond the horizon. `grad f` is bounded by
    /// `lip(h)/theta0`, so `psi = f - h + mu` has gradient at most
    /// `lip(h)(1 + 1/theta0)`.
    pub fn truncation_tail(&self, q: &Quantity, x: &[f64], horizon: f64) -> f64 {
        let lip = match self.h.lip_bound() {
            Some(l) => l,
            None => return f64::INFINITY,
        };
        let th0 = self.theta.theta0;
        let c = self.contraction.c;
        let lip_psi = lip * (1.0 + 1.0 / th0);
        match q {
            Quantity::Value => {
                let m1 = self.second_moment_bound().sqrt();
                2.0 * (-c * horizon).exp() * (m1 + norm(x)) * lip / c
            }
            Quantity::Grad { u } => lip * norm(u) * (-th0 * horizon).exp() / th0,
            Quantity::ValueResolvent => {
                let m1 = self.second_moment_bound().sqrt();
                // |E psi(X_t)| <= 2 e^{-ct}(m1 + |x|) lip_psi, damped by e^{-t}.
                2.0 * (m1 + norm(x)) * lip_psi * (-(1.0 + c) * horizon).exp() / (1.0 + c)
            }
            Quantity::GradResolvent { u } => lip_psi * norm(u) * (-(1.0 + th0) * horizon).exp() / (1.0 + th0),
            Quantity::Hess { u1, u2 } => {
                // |E[F_t I_{u2}(t)]| <= lip_psi |u1| e^{-theta0 t} |u2| / (2 t sqrt(theta0)).
                let lead = lip_psi * norm(u1) * norm(u2) * (-(1.0 + th0) * horizon).exp() / (2.0 * horizon * th0.sqrt());
                if self.model.hessian_vanishes() {
                    lead
                } else {
                    // The second-variation term is bounded by an unquantified
                    // constant; report the leading part only for linear drifts.
                    f64::INFINITY
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub point: Vec<f64>,
    pub residual: f64,
    pub se: f64,
    pub mc_error: f64,
    pub plugin_error: f64,
    pub truncation_tail: f64,
    pub pass: bool,
}

/// Which derivative of the Gaussian Stein solution to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OracleOrder {
    Value,
    Grad(Vec<f64>),
    Hess(Vec<f64>, Vec<f64>),
}

/// Stein solution for the standard normal target by deterministic
/// quadrature of the Mehler representation
/// `f(x) = -int_0^inf (E h(e^{-s} x + sqrt(1 - e^{-2s}) Z) - E h(Z)) ds`.
///
/// With `e^{-s} = cos(phi)` the time integral runs over `[0, pi/2]`; the
/// gradient differentiates `h` under the expectation and the Hessian moves
/// the second derivative onto the Gaussian weight, so only `grad h` is used.
pub fn gaussian_oracle(h: &TestFunction, x: &[f64], order: &OracleOrder) -> Result<f64> {
    let d = h.dim();
    ensure_dim("point", d, x.len())?;
    if d > 3 {
        return Err(Error::Unsupported(format!("Gaussian oracle limited to d <= 3 (got d = {d})")));
    }
    let inner_tol = 1e-13;
    let outer_tol = 1e-10;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut y = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut failed = None;
    let mut expect = |phi: f64, which: &dyn Fn(&[f64], &[f64], &mut [f64]) -> f64| -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        match quadrature::normal_expectation(
            d,
            |z| {
                for i in 0..d {
                    y[i] = c * x[i] + s * z[i];
                }
                which(&y, z, &mut g)
            },
            inner_tol,
        ) {
            Ok(v) => v,
            Err(e) => {
                failed = Some(e);
                0.0
            }
        }
    };
    let value = match order {
        OracleOrder::Value => {
            let ez = quadrature::normal_expectation(d, |z| h.eval(z), inner_tol)?;
            -quadrature::integrate(|phi| phi.tan() * (expect(phi, &|y, _, _| h.eval(y)) - ez), 0.0, half_pi, outer_tol)
        }
        OracleOrder::Grad(u) => {
            ensure_dim("direction", d, u.len())?;
            -quadrature::integrate(|phi| phi.sin() * expect(phi, &|y, _, g| h.directional(y, u, g)), 0.0, half_pi, outer_tol)
        }
        OracleOrder::Hess(u1, u2) => {
            ensure_dim("direction", d, u1.len())?;
            ensure_dim("direction", d, u2.len())?;
            -quadrature::integrate(
                |phi| phi.cos() * expect(phi, &|y, z, g| h.directional(y, u1, g) * dot(u2, z)),
                0.0,
                half_pi,
                outer_tol,
            )
        }
    };
    match failed {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// Uniform tensor grid with multilinear interpolation and linear
/// extrapolation outside the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: usize,
}

impl GridAxes {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn step(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.nodes - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        (0..self.dim())
            .map(|i| {
                let k = rem % self.nodes;
                rem /= self.nodes;
                self.lo[i] + k as f64 * self.step(i)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldCache {
    pub axes: GridAxes,
    pub components: usize,
    pub values: Vec<f64>,
    pub node_se: Vec<f64>,
}

impl FieldCache {
    /// Evaluate `node(x) -> (values, standard errors)` at every grid node.
    pub fn build(axes: GridAxes, components: usize, mut node: impl FnMut(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if axes.nodes < 2 || axes.dim() == 0 || axes.hi.len() != axes.dim() {
            return Err(Error::InvalidInput("cache grid needs at least two nodes per axis".into()));
        }
        let n = axes.len();
        let mut values = Vec::with_capacity(n * components);
        let mut node_se = Vec::with_capacity(n * components);
        for flat in 0..n {
            let (v, s) = node(&axes.point(flat))?;
            ensure_dim("cache node values", components, v.len())?;
            values.extend(v);
            node_se.extend(s);
        }
        Ok(Self { axes, components, values, node_se })
    }

    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) {
        let d = self.axes.dim();
        let n = self.axes.nodes;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for i in 0..d {
            let s = self.axes.step(i);
            let pos = (x[i] - self.axes.lo[i]) / s;
            let k = (pos.floor().max(0.0) as usize).min(n - 2);
            base[i] = k;
            frac[i] = pos - k as f64;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            let mut stride = 1;
            for i in 0..d {
                let up = (corner >> i) & 1;
                w *= if up == 1 { frac[i] } else { 1.0 - frac[i] };
                flat += (base[i] + up) * stride;
                stride *= n;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.values[flat * self.components + c];
            }
        }
    }

    /// Largest node standard error (Euclidean over components).
    pub fn max_node_se(&self) -> f64 {
        self.node_se
            .chunks(self.components)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

impl ScalarField for FieldCache {
    fn value(&self, x: &[f64]) -> f64 {
        let mut o = [0.0];
        self.interpolate(x, &mut o);
        o[0]
    }
    fn error(&self) -> f64 {
        self.max_node_se()
    }
}

impl VectorField for FieldCache {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        self.interpolate(x, out)
    }
    fn error(&self) -> f64 {
        self.max_node_se()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSpec {
    pub nodes_per_axis: usize,
    /// Half-width of the box in target standard deviations.
    pub half_width_sd: f64,
    pub config: SteinConfig,
}

impl SteinProblem {
    /// Per-coordinate mean and standard deviation of the target.
    pub fn target_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.model.dim();
        match self.model.kind() {
            DriftKind::Linear(a) => {
                let cov: DMatrix<f64> = a.clone().try_inverse().ok_or_else(|| Error::InvalidInput("A is singular".into()))?;
                Ok((vec![0.0; d], (0..d).map(|i| cov[(i, i)].sqrt()).collect()))
            }
            _ => {
                let method = if d == 1 {
                    TargetMeanMethod::DensityQuadrature { intervals: 20_000 }
                } else {
                    TargetMeanMethod::ErgodicAverage { time_per_chain: 200.0, dt: 1e-2, chains: 16, seed: 0x5eed }
                };
                let mut mean = Vec::with_capacity(d);
                let mut sd = Vec::with_capacity(d);
                for i in 0..d {
                    let m1 = target_mean_of(&self.model, &self.theta, |x| x[i], &method)?.value;
                    let m2 = target_mean_of(&self.model, &self.theta, |x| x[i] * x[i], &method)?.value;
                    mean.push(m1);
                    sd.push((m2 - m1 * m1).max(1e-12).sqrt());
                }
                Ok((mean, sd))
            }
        }
    }

    pub fn cache_axes(&self, spec: &CacheSpec) -> Result<GridAxes> {
        let (mean, sd) = self.target_moments()?;
        Ok(GridAxes {
            lo: mean.iter().zip(&sd).map(|(m, s)| m - spec.half_width_sd * s).collect(),
            hi: mean.iter().zip(&sd).map(|(m, s)| m + spec.half_width_sd * s).collect(),
            nodes: spec.nodes_per_axis,
        })
    }

    /// Cache of `f`. All nodes share one noise stream (common random
    /// numbers), derived from the configured seed.
    pub fn build_f_cache(&self, spec: &CacheSpec) -> Result<FieldCache> {
        let axes = self.cache_axes(spec)?;
        let cfg = SteinConfig { seed: rng::derive_seed(spec.config.seed, 0xcac4e_f), ..spec.config };
        FieldCache::build(axes, 1, |x| {
            let e = self.estimate_f(x, &cfg)?;
            Ok((vec![e.value], vec![e.std_error]))
        })
    }

    /// Cache of `grad f` along the coordinate axes.
    pub fn build_grad_cache(&self, spec: &CacheSpec) -> Result<FieldCache> {
        let d = self.model.dim();
        let axes = self.cache_axes(spec)?;
        let cfg = SteinConfig { seed: rng::derive_seed(spec.config.seed, 0xcac4e_9), gradient_control_variates: true, ..spec.config };
        let qs: Vec<Quantity> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                Quantity::Grad { u: e }
            })
            .collect();
        FieldCache::build(axes, d, |x| {
            let est = self.estimate_many(x, &qs, &cfg, Plugins::default())?;
            Ok((est.iter().map(|e| e.value).collect(), est.iter().map(|e| e.std_error).collect()))
        })
    }
}
