//! Bismut weights along a simulated path and Monte Carlo checks of the
//! integration-by-parts identities they satisfy.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::functions::TestFunction;
use crate::model::DriftModel;
use crate::paths::{dot, simulate_bundle, BrownianPath, FlowBundle, FlowRequest, Path, TimeGrid};
use crate::stats::{self, loglog_fit, par_fill, LineFit, MeanSe};

/// Weight functionals need at least this many Ito-sum terms.
pub const MIN_WEIGHT_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub t: f64,
    pub i_u1: f64,
    pub i_u2: Option<f64>,
    pub dv2_i_u1: Option<f64>,
    pub i_u1_u2: Option<f64>,
}

fn weight_index(grid: TimeGrid, t: f64) -> Result<usize> {
    let k = grid.index_of(t)?;
    if k < MIN_WEIGHT_STEPS {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            constraint: format!("must be at least {MIN_WEIGHT_STEPS} dt = {}; refine the grid", MIN_WEIGHT_STEPS as f64 * grid.dt()),
        });
    }
    Ok(k)
}

/// Left-point sum `sum_{k<n} <y_k, Delta B_k>`.
pub fn ito_sum(path: &Path, noise: &BrownianPath, n: usize) -> f64 {
    (0..n).map(|k| dot(path.at(k), noise.increment(k))).sum()
}

/// `(1/(sqrt 2 t)) int_0^t <y_s, dB_s>` for a variation path `y`.
fn bismut_integral(path: &Path, noise: &BrownianPath, grid: TimeGrid, t: f64) -> Result<f64> {
    let k = weight_index(grid, t)?;
    Ok(ito_sum(path, noise, k) / (std::f64::consts::SQRT_2 * t))
}

/// `I_{u1}(t)`.
pub fn weight_first(bundle: &FlowBundle, t: f64) -> Result<f64> {
    bismut_integral(&bundle.var1, &bundle.noise, bundle.grid, t)
}

/// `I_{u2}(t)`.
pub fn weight_first_u2(bundle: &FlowBundle, t: f64) -> Result<f64> {
    let v2 = bundle.var2.as_ref().ok_or_else(|| Error::InvalidInput("bundle has no u2 variation".into()))?;
    bismut_integral(v2, &bundle.noise, bundle.grid, t)
}

/// `D_{V2} I_{u1}(t)`.
///
/// The stored Malliavin path is the flow for the bundle horizon `T`. Its
/// forcing weight is `s/T`, so the flow for an earlier horizon `t` is the
/// same path scaled by `T/t`; any grid node `t <= T` can be used.
pub fn weight_malliavin(bundle: &FlowBundle, t: f64) -> Result<f64> {
    let (v2, mal) = match (&bundle.var2, &bundle.malliavin) {
        (Some(v2), Some(m)) => (v2, m),
        _ => return Err(Error::InvalidInput("bundle lacks the u2 variation or the Malliavin flow".into())),
    };
    let k = weight_index(bundle.grid, t)?;
    let scale = bundle.grid.horizon() / t;
    let ito = scale * ito_sum(mal, &bundle.noise, k) / (std::f64::consts::SQRT_2 * t);
    let dt = bundle.grid.dt();
    let mut leb = 0.0;
    for j in 0..=k {
        let w = if j == 0 || j == k { 0.5 } else { 1.0 };
        leb += w * dot(bundle.var1.at(j), v2.at(j));
    }
    Ok(ito + leb * dt / (2.0 * t * t))
}

/// `I_{u1,u2}(t) = I_{u1} I_{u2} - D_{V2} I_{u1}`.
pub fn weight_second(bundle: &FlowBundle, t: f64) -> Result<f64> {
    Ok(weight_first(bundle, t)? * weight_first_u2(bundle, t)? - weight_malliavin(bundle, t)?)
}

pub fn weights(bundle: &FlowBundle, t: f64) -> Result<WeightSet> {
    let i_u1 = weight_first(bundle, t)?;
    let i_u2 = bundle.var2.as_ref().map(|_| weight_first_u2(bundle, t)).transpose()?;
    let dv2_i_u1 = bundle.malliavin.as_ref().map(|_| weight_malliavin(bundle, t)).transpose()?;
    let i_u1_u2 = match (i_u2, dv2_i_u1) {
        (Some(a), Some(b)) => Some(i_u1 * a - b),
        _ => None,
    };
    Ok(WeightSet { t, i_u1, i_u2, dv2_i_u1, i_u1_u2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub replicas: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Diagnostic record `{check, lhs, rhs, se, pass}`; `se` is the standard
/// error of the per-replica difference under common noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub lhs_se: f64,
    pub rhs_se: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn from_samples(check: impl Into<String>, m: &stats::SampleMatrix, k: f64) -> Self {
        let l = m.column_mean_se(0);
        let r = m.column_mean_se(1);
        let diff = m.combination_mean_se(&[(0, 1.0), (1, -1.0)]);
        Self {
            check: check.into(),
            lhs: l.mean,
            rhs: r.mean,
            se: diff.se,
            lhs_se: l.se,
            rhs_se: r.se,
            pass: diff.mean.abs() <= k * diff.se,
        }
    }
}

fn check_common(model: &DriftModel, x0: &[f64], h: &TestFunction, u: &[f64], cfg: &McConfig) -> Result<()> {
    let d = model.dim();
    ensure_dim("x0", d, x0.len())?;
    ensure_dim("direction", d, u.len())?;
    ensure_dim("test function", d, h.dim())?;
    if cfg.replicas < 2 {
        return Err(Error::InvalidInput("need at least two replicas".into()));
    }
    Ok(())
}

/// Bismut's integration by parts with `v = grad_u X / (sqrt 2 t)`:
/// `E <grad h(X_t), D_V X_t> = E[h(X_t) int <v, dB>]`, where `D_V X_t` is the
/// first variation.
pub fn verify_ibp(model: &DriftModel, x0: &[f64], t: f64, h: &TestFunction, u: &[f64], cfg: &McConfig) -> Result<IdentityCheck> {
    check_common(model, x0, h, u, cfg)?;
    let grid = TimeGrid::with_dt(t, cfg.dt)?;
    weight_index(grid, grid.horizon())?;
    let d = model.dim();
    let req = FlowRequest::first(u.to_vec());
    let m = par_fill(cfg.replicas, 2, || vec![0.0; d], |g, i, row| {
        let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
        let b = simulate_bundle(model, x0, &noise, &req)?;
        let xt = b.state.terminal();
        row[0] = h.directional(xt, b.var1.terminal(), g);
        row[1] = h.eval(xt) * weight_first(&b, grid.horizon())?;
        Ok(())
    })?;
    Ok(IdentityCheck::from_samples("ibp", &m, 3.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BelCheck {
    pub check: String,
    pub fd_value: f64,
    pub fd_se: f64,
    pub bismut_value: f64,
    pub bismut_se: f64,
    /// SE of the per-replica difference (common noise).
    pub se: f64,
    pub pass: bool,
}

/// `grad_u E h(X_t^x) = E[h(X_t^x) I_u(t)]` against a central difference of
/// Monte Carlo means at `x0 +- eps u` under common noise.
pub fn verify_bel(model: &DriftModel, x0: &[f64], t: f64, h: &TestFunction, u: &[f64], fd_eps: f64, cfg: &McConfig) -> Result<BelCheck> {
    check_common(model, x0, h, u, cfg)?;
    if !(1e-4..=1e-2).contains(&fd_eps) {
        return Err(Error::OutOfRange { name: "fd_eps", value: fd_eps, constraint: "must lie in [1e-4, 1e-2]".into() });
    }
    let grid = TimeGrid::with_dt(t, cfg.dt)?;
    weight_index(grid, grid.horizon())?;
    let d = model.dim();
    let req = FlowRequest::first(u.to_vec());
    let xp: Vec<f64> = x0.iter().zip(u).map(|(a, b)| a + fd_eps * b).collect();
    let xm: Vec<f64> = x0.iter().zip(u).map(|(a, b)| a - fd_eps * b).collect();
    let m = par_fill(cfg.replicas, 2, || (), |_, i, row| {
        let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
        let b = simulate_bundle(model, x0, &noise, &req)?;
        let sp = crate::paths::simulate_state(model, &xp, grid, &noise)?;
        let sm = crate::paths::simulate_state(model, &xm, grid, &noise)?;
        row[0] = (h.eval(sp.terminal()) - h.eval(sm.terminal())) / (2.0 * fd_eps);
        row[1] = h.eval(b.state.terminal()) * weight_first(&b, grid.horizon())?;
        Ok(())
    })?;
    let fd = m.column_mean_se(0);
    let bi = m.column_mean_se(1);
    let diff = m.combination_mean_se(&[(0, 1.0), (1, -1.0)]);
    Ok(BelCheck {
        check: "bel".into(),
        fd_value: fd.mean,
        fd_se: fd.se,
        bismut_value: bi.mean,
        bismut_se: bi.se,
        se: diff.se,
        pass: diff.mean.abs() <= 3.0 * diff.se,
    })
}

/// Second-order identity `E[<grad h(X_t), grad_{u2} X_t> I_{u1}(t)] = E[h(X_t) I_{u1,u2}(t)]`.
pub fn verify_second_order(
    model: &DriftModel,
    x0: &[f64],
    t: f64,
    h: &TestFunction,
    u1: &[f64],
    u2: &[f64],
    cfg: &McConfig,
) -> Result<IdentityCheck> {
    check_common(model, x0, h, u1, cfg)?;
    ensure_dim("u2", model.dim(), u2.len())?;
    let grid = TimeGrid::with_dt(t, cfg.dt)?;
    weight_index(grid, grid.horizon())?;
    let d = model.dim();
    let req = FlowRequest { u1: u1.to_vec(), u2: Some(u2.to_vec()), second: false, malliavin: true };
    let m = par_fill(cfg.replicas, 2, || vec![0.0; d], |g, i, row| {
        let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
        let b = simulate_bundle(model, x0, &noise, &req)?;
        let xt = b.state.terminal();
        let w = weights(&b, grid.horizon())?;
        let v2 = b.var2.as_ref().expect("requested").terminal();
        row[0] = h.directional(xt, v2, g) * w.i_u1;
        row[1] = h.eval(xt) * w.i_u1_u2.expect("requested");
        Ok(())
    })?;
    Ok(IdentityCheck::from_samples("second_order", &m, 3.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentScaling {
    pub t: Vec<f64>,
    pub abs_i_u1: Vec<MeanSe>,
    pub abs_dv2_i_u1: Vec<MeanSe>,
    pub abs_i_u1_u2: Vec<MeanSe>,
    pub fit_i_u1: LineFit,
    pub fit_dv2_i_u1: LineFit,
    pub fit_i_u1_u2: LineFit,
}

/// First absolute moments of the three weights on a list of horizons, all
/// read off one path per replica on a grid with step `dt`, and their
/// log-log slopes in `t`.
pub fn moment_scaling(
    model: &DriftModel,
    x0: &[f64],
    u1: &[f64],
    u2: &[f64],
    ts: &[f64],
    cfg: &McConfig,
) -> Result<MomentScaling> {
    let d = model.dim();
    ensure_dim("x0", d, x0.len())?;
    ensure_dim("u1", d, u1.len())?;
    ensure_dim("u2", d, u2.len())?;
    let tmax = ts.iter().copied().fold(f64::NAN, f64::max);
    if ts.len() < 2 || !(tmax > 0.0) {
        return Err(Error::InvalidInput("moment scaling needs at least two positive horizons".into()));
    }
    let grid = TimeGrid::with_dt(tmax, cfg.dt)?;
    for &t in ts {
        weight_index(grid, t)?;
    }
    let req = FlowRequest { u1: u1.to_vec(), u2: Some(u2.to_vec()), second: false, malliavin: true };
    let n = ts.len();
    let m = par_fill(cfg.replicas, 3 * n, || (), |_, i, row| {
        let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
        let b = simulate_bundle(model, x0, &noise, &req)?;
        for (j, &t) in ts.iter().enumerate() {
            let w = weights(&b, t)?;
            row[j] = w.i_u1.abs();
            row[n + j] = w.dv2_i_u1.expect("requested").abs();
            row[2 * n + j] = w.i_u1_u2.expect("requested").abs();
        }
        Ok(())
    })?;
    let col = |off: usize| -> Vec<MeanSe> { (0..n).map(|j| m.column_mean_se(off + j)).collect() };
    let (a, b, c) = (col(0), col(n), col(2 * n));
    let fit = |v: &[MeanSe]| loglog_fit(ts, &v.iter().map(|s| s.mean).collect::<Vec<_>>());
    Ok(MomentScaling {
        t: ts.to_vec(),
        fit_i_u1: fit(&a)?,
        fit_dv2_i_u1: fit(&b)?,
        fit_i_u1_u2: fit(&c)?,
        abs_i_u1: a,
        abs_dv2_i_u1: b,
        abs_i_u1_u2: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_linear_model;
    use nalgebra::DMatrix;

    #[test]
    fn second_weight_is_exact_combination() {
        let (m, _) = make_linear_model(DMatrix::identity(1, 1)).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let noise = BrownianPath::sample(1, grid, 5, 0);
        let b = simulate_bundle(&m, &[0.3], &noise, &FlowRequest::full(vec![1.0], vec![1.0])).unwrap();
        let w = weights(&b, 1.0).unwrap();
        assert_eq!(w.i_u1_u2.unwrap(), w.i_u1 * w.i_u2.unwrap() - w.dv2_i_u1.unwrap());
    }

    #[test]
    fn refuses_short_horizons() {
        let (m, _) = make_linear_model(DMatrix::identity(1, 1)).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let noise = BrownianPath::sample(1, grid, 5, 0);
        let b = simulate_bundle(&m, &[0.3], &noise, &FlowRequest::first(vec![1.0])).unwrap();
        assert!(weight_first(&b, 0.03).is_err());
        assert!(weight_first(&b, 0.04).is_ok());
        assert!(weight_first(&b, -1.0).is_err());
    }
}
