//! Euler-Maruyama paths of the Langevin SDE and the linear flows carried
//! along them (first and second variation, Malliavin derivative).

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_positive, Error, Result};
use crate::model::DriftModel;
use crate::rng;

/// Paths whose state norm exceeds this are treated as numerically diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        ensure_positive("horizon", horizon)?;
        if steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid on `[0, horizon]` whose step is `dt` rounded to divide the horizon.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        ensure_positive("dt", dt)?;
        Self::new(horizon, ((horizon / dt).round() as usize).max(1))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    /// Index of the grid node at time `t`; `t` must lie on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        if !(t > 0.0) {
            return Err(Error::OutOfRange { name: "t", value: t, constraint: "must be > 0".into() });
        }
        let k = (t / self.dt()).round();
        if k > self.steps as f64 || (k * self.dt() - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "t = {t} is not a node of the grid (dt = {}, horizon = {})",
                self.dt(),
                self.horizon
            )));
        }
        Ok(k as usize)
    }

    pub fn halved(&self) -> Self {
        Self { horizon: self.horizon, steps: 2 * self.steps }
    }
}

/// Values at the `steps + 1` grid nodes, stored node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    dim: usize,
    data: Vec<f64>,
}

impl Path {
    pub fn zeros(dim: usize, nodes: usize) -> Self {
        Self { dim, data: vec![0.0; dim * nodes] }
    }

    pub fn from_data(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.nodes() - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.nodes()).map(|k| norm(self.at(k))).fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Brownian increments `Delta B_k ~ N(0, dt I_d)` on a grid.
///
/// `level` counts bridge refinements applied to the base sample; a path at
/// level `l` on grid `T/(2^l m)` shares its coarse sums with the base path.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    dim: usize,
    grid: TimeGrid,
    seed: u64,
    replica: u64,
    level: u32,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn sample(dim: usize, grid: TimeGrid, seed: u64, replica: u64) -> Self {
        let mut p = Self { dim, grid, seed, replica, level: 0, increments: vec![0.0; dim * grid.steps()] };
        p.resample(seed, replica);
        p
    }

    /// Regenerate in place for another `(seed, replica)` key.
    pub fn resample(&mut self, seed: u64, replica: u64) {
        self.seed = seed;
        self.replica = replica;
        self.level = 0;
        let mut r = rng::stream(seed, replica);
        rng::fill_normal(&mut r, &mut self.increments, self.grid.dt().sqrt());
    }

    pub fn zero(dim: usize, grid: TimeGrid) -> Self {
        Self { dim, grid, seed: 0, replica: 0, level: 0, increments: vec![0.0; dim * grid.steps()] }
    }

    pub fn from_increments(dim: usize, grid: TimeGrid, increments: Vec<f64>) -> Result<Self> {
        ensure_dim("increments", dim * grid.steps(), increments.len())?;
        Ok(Self { dim, grid, seed: 0, replica: 0, level: 0, increments })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn increments_mut(&mut self) -> &mut [f64] {
        &mut self.increments
    }

    /// Sum adjacent pairs of increments: the same path on a grid with twice
    /// the step.
    pub fn coarsen(&self) -> Result<Self> {
        let m = self.grid.steps();
        if m % 2 != 0 {
            return Err(Error::InvalidInput(format!("cannot coarsen a grid with odd step count {m}")));
        }
        let d = self.dim;
        let mut inc = vec![0.0; d * m / 2];
        for k in 0..m / 2 {
            for i in 0..d {
                inc[k * d + i] = self.increments[2 * k * d + i] + self.increments[(2 * k + 1) * d + i];
            }
        }
        Ok(Self {
            dim: d,
            grid: TimeGrid::new(self.grid.horizon(), m / 2)?,
            seed: self.seed,
            replica: self.replica,
            level: self.level.saturating_sub(1),
            increments: inc,
        })
    }

    /// Split every increment at its midpoint by a Brownian bridge draw. The
    /// refined path sums back to this one exactly.
    pub fn refine(&self) -> Self {
        let d = self.dim;
        let m = self.grid.steps();
        let level = self.level + 1;
        let mut r = rng::stream(rng::derive_seed(self.seed, 0xb41d_6e00 + level as u64), self.replica);
        let sd = (self.grid.dt() / 4.0).sqrt();
        let mut inc = vec![0.0; 2 * d * m];
        for k in 0..m {
            for i in 0..d {
                let total = self.increments[k * d + i];
                let a = 0.5 * total + sd * rng::normal(&mut r);
                inc[2 * k * d + i] = a;
                inc[(2 * k + 1) * d + i] = total - a;
            }
        }
        Self { dim: d, grid: self.grid.halved(), seed: self.seed, replica: self.replica, level, increments: inc }
    }
}

fn check_state(step: usize, x: &[f64]) -> Result<()> {
    let n = norm(x);
    if !n.is_finite() || n > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { step, norm: n });
    }
    Ok(())
}

/// Euler-Maruyama into a preallocated node-major buffer of `m + 1` nodes.
pub fn simulate_state_into(
    model: &DriftModel,
    x0: &[f64],
    dt: f64,
    increments: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) -> Result<()> {
    let d = x0.len();
    let m = increments.len() / d;
    let s2 = std::f64::consts::SQRT_2;
    out[..d].copy_from_slice(x0);
    for k in 0..m {
        let (done, rest) = out.split_at_mut((k + 1) * d);
        let x = &done[k * d..];
        model.drift(x, scratch);
        let db = &increments[k * d..(k + 1) * d];
        let next = &mut rest[..d];
        for i in 0..d {
            next[i] = x[i] + scratch[i] * dt + s2 * db[i];
        }
        check_state(k + 1, next)?;
    }
    Ok(())
}

pub fn simulate_state(model: &DriftModel, x0: &[f64], grid: TimeGrid, noise: &BrownianPath) -> Result<Path> {
    let d = model.dim();
    ensure_dim("x0", d, x0.len())?;
    ensure_dim("noise", d, noise.dim())?;
    if noise.grid() != grid {
        return Err(Error::InvalidInput("noise was sampled on a different grid".into()));
    }
    check_state(0, x0)?;
    let mut path = Path::zeros(d, grid.steps() + 1);
    let mut scratch = vec![0.0; d];
    simulate_state_into(model, x0, grid.dt(), noise.increments(), path.as_mut_slice(), &mut scratch)?;
    Ok(path)
}

/// Heun integration of `y' = (grad g)(X_t) y + F_t` along a state path, with
/// the forcing given at the nodes (`None` for the homogeneous equation).
pub fn integrate_linear_into(
    model: &DriftModel,
    state: &[f64],
    dt: f64,
    init: &[f64],
    forcing: Option<&[f64]>,
    out: &mut [f64],
    scratch: &mut LinearScratch,
) -> Result<()> {
    let d = init.len();
    let m = state.len() / d - 1;
    out[..d].copy_from_slice(init);
    let LinearScratch { k0, pred, k1 } = scratch;
    for k in 0..m {
        let (done, rest) = out.split_at_mut((k + 1) * d);
        let y = &done[k * d..];
        let x0 = &state[k * d..(k + 1) * d];
        let x1 = &state[(k + 1) * d..(k + 2) * d];
        model.jacobian_action(x0, y, k0);
        if let Some(f) = forcing {
            for i in 0..d {
                k0[i] += f[k * d + i];
            }
        }
        for i in 0..d {
            pred[i] = y[i] + dt * k0[i];
        }
        model.jacobian_action(x1, pred, k1);
        if let Some(f) = forcing {
            for i in 0..d {
                k1[i] += f[(k + 1) * d + i];
            }
        }
        let next = &mut rest[..d];
        for i in 0..d {
            next[i] = y[i] + 0.5 * dt * (k0[i] + k1[i]);
        }
        let n = norm(next);
        if !n.is_finite() {
            return Err(Error::Divergence { step: k + 1, norm: n });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LinearScratch {
    k0: Vec<f64>,
    pred: Vec<f64>,
    k1: Vec<f64>,
}

impl LinearScratch {
    pub fn new(d: usize) -> Self {
        Self { k0: vec![0.0; d], pred: vec![0.0; d], k1: vec![0.0; d] }
    }
}

fn integrate_linear(model: &DriftModel, state: &Path, grid: TimeGrid, init: &[f64], forcing: Option<&Path>) -> Result<Path> {
    let d = model.dim();
    ensure_dim("initial condition", d, init.len())?;
    ensure_dim("state path nodes", grid.steps() + 1, state.nodes())?;
    let mut out = Path::zeros(d, grid.steps() + 1);
    let mut scratch = LinearScratch::new(d);
    integrate_linear_into(model, state.as_slice(), grid.dt(), init, forcing.map(|f| f.as_slice()), out.as_mut_slice(), &mut scratch)?;
    Ok(out)
}

pub fn simulate_variation1(model: &DriftModel, state: &Path, u: &[f64], grid: TimeGrid) -> Result<Path> {
    integrate_linear(model, state, grid, u, None)
}

/// Hessian forcing `w_k * (grad^2 g)(X_k)[a_k, b_k]` at every node.
pub fn hessian_forcing_into(
    model: &DriftModel,
    state: &[f64],
    a: &[f64],
    b: &[f64],
    weight: impl Fn(usize) -> f64,
    out: &mut [f64],
) {
    let d = model.dim();
    for k in 0..state.len() / d {
        let r = k * d..(k + 1) * d;
        model.hessian_action(&state[r.clone()], &a[r.clone()], &b[r.clone()], &mut out[r.clone()]);
        let w = weight(k);
        out[r].iter_mut().for_each(|v| *v *= w);
    }
}

pub fn simulate_variation2(model: &DriftModel, state: &Path, var1: &Path, var2: &Path, grid: TimeGrid) -> Result<Path> {
    let d = model.dim();
    if model.hessian_vanishes() {
        return Ok(Path::zeros(d, grid.steps() + 1));
    }
    let mut f = Path::zeros(d, grid.steps() + 1);
    hessian_forcing_into(model, state.as_slice(), var2.as_slice(), var1.as_slice(), |_| 1.0, f.as_mut_slice());
    integrate_linear(model, state, grid, &vec![0.0; d], Some(&f))
}

/// `D_{V2} grad_{u1} X` on `[0, t]` with `t` the grid horizon: the forcing
/// carries the weight `s / t`.
pub fn simulate_malliavin(model: &DriftModel, state: &Path, var1: &Path, var2: &Path, grid: TimeGrid, t: f64) -> Result<Path> {
    if (t - grid.horizon()).abs() > 1e-12 * t.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "Malliavin flow horizon t = {t} must equal the grid horizon {}",
            grid.horizon()
        )));
    }
    let d = model.dim();
    if model.hessian_vanishes() {
        return Ok(Path::zeros(d, grid.steps() + 1));
    }
    let mut f = Path::zeros(d, grid.steps() + 1);
    hessian_forcing_into(model, state.as_slice(), var2.as_slice(), var1.as_slice(), |k| grid.time(k) / t, f.as_mut_slice());
    integrate_linear(model, state, grid, &vec![0.0; d], Some(&f))
}

/// Which flows to carry along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRequest {
    pub u1: Vec<f64>,
    pub u2: Option<Vec<f64>>,
    /// Second variation `grad_{u2} grad_{u1} X` (needs `u2`).
    pub second: bool,
    /// `D_{V2} grad_{u1} X` at the grid horizon (needs `u2`).
    pub malliavin: bool,
}

impl FlowRequest {
    pub fn first(u1: Vec<f64>) -> Self {
        Self { u1, u2: None, second: false, malliavin: false }
    }

    pub fn full(u1: Vec<f64>, u2: Vec<f64>) -> Self {
        Self { u1, u2: Some(u2), second: true, malliavin: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBundle {
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
    pub noise: BrownianPath,
    pub u1: Vec<f64>,
    pub u2: Option<Vec<f64>>,
    pub state: Path,
    pub var1: Path,
    pub var2: Option<Path>,
    pub var12: Option<Path>,
    pub malliavin: Option<Path>,
}

pub fn simulate_bundle(model: &DriftModel, x0: &[f64], noise: &BrownianPath, req: &FlowRequest) -> Result<FlowBundle> {
    let d = model.dim();
    ensure_dim("u1", d, req.u1.len())?;
    if (req.second || req.malliavin) && req.u2.is_none() {
        return Err(Error::InvalidInput("second variation and Malliavin flows need u2".into()));
    }
    let grid = noise.grid();
    let state = simulate_state(model, x0, grid, noise)?;
    let var1 = simulate_variation1(model, &state, &req.u1, grid)?;
    let var2 = match &req.u2 {
        Some(u2) => {
            ensure_dim("u2", d, u2.len())?;
            Some(simulate_variation1(model, &state, u2, grid)?)
        }
        None => None,
    };
    let var12 = match (&var2, req.second) {
        (Some(v2), true) => Some(simulate_variation2(model, &state, &var1, v2, grid)?),
        _ => None,
    };
    let malliavin = match (&var2, req.malliavin) {
        (Some(v2), true) => Some(simulate_malliavin(model, &state, &var1, v2, grid, grid.horizon())?),
        _ => None,
    };
    Ok(FlowBundle {
        x0: x0.to_vec(),
        grid,
        noise: noise.clone(),
        u1: req.u1.clone(),
        u2: req.u2.clone(),
        state,
        var1,
        var2,
        var12,
        malliavin,
    })
}

impl FlowBundle {
    /// Path dump: `step,t,x_0..,v_0..` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.state.dim();
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend((0..d).map(|i| format!("var1_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.state.nodes() {
            let mut row = vec![k.to_string(), format!("{}", self.grid.time(k))];
            row.extend(self.state.at(k).iter().map(|v| format!("{v}")));
            row.extend(self.var1.at(k).iter().map(|v| format!("{v}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Largest value of `|var1_k| e^{theta0 t_k} / |u1|`; the deterministic
    /// Jacobian bound asks for this to be at most one (plus slack).
    pub fn variation_bound_ratio(&self, theta0: f64) -> f64 {
        let un = norm(&self.u1);
        if un == 0.0 {
            return 0.0;
        }
        (0..self.var1.nodes())
            .map(|k| norm(self.var1.at(k)) * (theta0 * self.grid.time(k)).exp() / un)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvReport {
    pub terminal_discrepancy: f64,
    /// Max over interior nodes of `|D_V X_s - (s/t) grad_u X_s|`.
    pub interior_discrepancy: f64,
    /// Discrepancy at the node closest to `t/2`.
    pub midpoint_discrepancy: f64,
}

/// Integrate `D_V X` from its own equation `y' = (grad g) y + sqrt(2) v(s)`
/// with `v(s) = grad_u X_s / (sqrt(2) t)` and compare with the variation.
pub fn verify_dv_equals_variation(
    model: &DriftModel,
    x0: &[f64],
    grid: TimeGrid,
    noise: &BrownianPath,
    u: &[f64],
) -> Result<DvReport> {
    let d = model.dim();
    let t = grid.horizon();
    let state = simulate_state(model, x0, grid, noise)?;
    let var1 = simulate_variation1(model, &state, u, grid)?;
    let forcing = Path::from_data(d, var1.as_slice().iter().map(|v| v / t).collect());
    let dv = integrate_linear(model, &state, grid, &vec![0.0; d], Some(&forcing))?;
    let m = grid.steps();
    let gap = |k: usize| {
        let s = grid.time(k) / t;
        dv.at(k).iter().zip(var1.at(k)).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt()
    };
    Ok(DvReport {
        terminal_discrepancy: gap(m),
        interior_discrepancy: (1..m).map(gap).fold(0.0, f64::max),
        midpoint_discrepancy: gap(m / 2),
    })
}

/// Product of per-step Heun propagators of the variation equation between
/// nodes `from` and `to`: the matrix `J_{from,to}`.
pub fn propagator(model: &DriftModel, state: &Path, grid: TimeGrid, from: usize, to: usize) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if from > to || to > grid.steps() {
        return Err(Error::InvalidInput(format!("bad propagator range {from}..{to}")));
    }
    let mut j = DMatrix::<f64>::identity(d, d);
    let mut sub = Path::zeros(d, to - from + 1);
    for k in from..=to {
        sub.at_mut(k - from).copy_from_slice(state.at(k));
    }
    let mut scratch = LinearScratch::new(d);
    let mut col = vec![0.0; d * (to - from + 1)];
    for c in 0..d {
        let mut e = vec![0.0; d];
        e[c] = 1.0;
        integrate_linear_into(model, sub.as_slice(), grid.dt(), &e, None, &mut col, &mut scratch)?;
        for r in 0..d {
            j[(r, c)] = col[(to - from) * d + r];
        }
    }
    Ok(j)
}

/// Central finite difference of the discrete state path along the
/// Cameron-Martin direction with density `v` (given per step, frozen):
/// `(X(B + eps V) - X(B - eps V)) / (2 eps)` with `V_k = v_k dt`.
pub fn malliavin_fd(model: &DriftModel, x0: &[f64], noise: &BrownianPath, v: &[f64], eps: f64) -> Result<Path> {
    let d = model.dim();
    let grid = noise.grid();
    ensure_dim("direction density", d * grid.steps(), v.len())?;
    let dt = grid.dt();
    let shifted = |sign: f64| -> Result<Path> {
        let inc: Vec<f64> = noise.increments().iter().zip(v).map(|(b, vk)| b + sign * eps * vk * dt).collect();
        simulate_state(model, x0, grid, &BrownianPath::from_increments(d, grid, inc)?)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    Ok(Path::from_data(
        d,
        plus.as_slice().iter().zip(minus.as_slice()).map(|(a, b)| (a - b) / (2.0 * eps)).collect(),
    ))
}
