//! Exchangeable pairs `(W, W')`: the one-step ULA pair and the resampling
//! pair for normalized sums, their conditional structure
//! `E[delta | W] = lambda (g(W) + R1)`, `E[delta delta^T | W] = 2 lambda (I + R2)`,
//! and the three bound terms
//! `(1/lambda) E[|delta|^3 (|log|delta|| v 1)] + E|R1| + sqrt(d) E||R2||_HS`.

use nalgebra::DMatrix;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure_dim, ensure_positive, Error, Result};
use crate::model::DriftModel;
use crate::paths::{dot, DIVERGENCE_THRESHOLD};
use crate::rng;
use crate::stats::{self, MeanSe};

/// Analytic or to-be-regressed first-order remainder.
#[derive(Clone, Debug, PartialEq)]
pub enum R1Mode {
    /// `R1(W_i)` per sample, flat `n x d`.
    Analytic(Vec<f64>),
    Regression,
}

/// Second-order remainder `R2`.
#[derive(Clone, Debug, PartialEq)]
pub enum R2Mode {
    /// `R2 = sum_k r_{2k-1} r_{2k}^T` with `factors` pairs per sample, stored
    /// flat as `n x (2 factors) x d`.
    AnalyticRank1 { factors: usize, data: Vec<f64> },
    /// Full `d x d` matrix per sample (column-major), flat `n x d x d`.
    AnalyticFull(Vec<f64>),
    Regression,
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    dim: usize,
    w: Vec<f64>,
    w_prime: Vec<f64>,
    lambda: f64,
    r1: R1Mode,
    r2: R2Mode,
}

impl PairBatch {
    pub fn new(dim: usize, w: Vec<f64>, w_prime: Vec<f64>, lambda: f64, r1: R1Mode, r2: R2Mode) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("pair dimension must be positive".into()));
        }
        ensure_positive("lambda", lambda)?;
        if w.len() % dim != 0 {
            return Err(Error::InvalidInput(format!("W has {} entries, not a multiple of d = {dim}", w.len())));
        }
        let n = w.len() / dim;
        ensure_dim("W' entries", w.len(), w_prime.len())?;
        if let R1Mode::Analytic(v) = &r1 {
            ensure_dim("R1 entries", n * dim, v.len())?;
        }
        match &r2 {
            R2Mode::AnalyticRank1 { factors, data } => ensure_dim("R2 factor entries", n * 2 * factors * dim, data.len())?,
            R2Mode::AnalyticFull(data) => ensure_dim("R2 entries", n * dim * dim, data.len())?,
            R2Mode::Regression => {}
        }
        Ok(Self { dim, w, w_prime, lambda, r1, r2 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.w.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn r1_mode(&self) -> &R1Mode {
        &self.r1
    }

    pub fn r2_mode(&self) -> &R2Mode {
        &self.r2
    }

    pub fn w(&self, i: usize) -> &[f64] {
        &self.w[i * self.dim..(i + 1) * self.dim]
    }

    pub fn w_prime(&self, i: usize) -> &[f64] {
        &self.w_prime[i * self.dim..(i + 1) * self.dim]
    }

    pub fn delta(&self, i: usize) -> Vec<f64> {
        self.w_prime(i).iter().zip(self.w(i)).map(|(a, b)| a - b).collect()
    }

    pub fn r1(&self, i: usize) -> Option<&[f64]> {
        match &self.r1 {
            R1Mode::Analytic(v) => Some(&v[i * self.dim..(i + 1) * self.dim]),
            R1Mode::Regression => None,
        }
    }

    /// `R2` at sample `i` as a matrix; rank-1 factors are multiplied out.
    pub fn r2_matrix(&self, i: usize) -> Option<DMatrix<f64>> {
        let d = self.dim;
        match &self.r2 {
            R2Mode::AnalyticRank1 { factors, data } => {
                let base = i * 2 * factors * d;
                let mut m = DMatrix::zeros(d, d);
                for k in 0..*factors {
                    let a = &data[base + 2 * k * d..base + (2 * k + 1) * d];
                    let b = &data[base + (2 * k + 1) * d..base + (2 * k + 2) * d];
                    for c in 0..d {
                        for r in 0..d {
                            m[(r, c)] += a[r] * b[c];
                        }
                    }
                }
                Some(m)
            }
            R2Mode::AnalyticFull(data) => Some(DMatrix::from_column_slice(d, d, &data[i * d * d..(i + 1) * d * d])),
            R2Mode::Regression => None,
        }
    }

    /// Append another batch built by the same construction.
    pub fn append(&mut self, other: PairBatch) -> Result<()> {
        ensure_dim("pair dimension", self.dim, other.dim)?;
        if self.lambda != other.lambda {
            return Err(Error::InvalidInput(format!("cannot merge pairs with lambda {} and {}", self.lambda, other.lambda)));
        }
        match (&mut self.r1, other.r1) {
            (R1Mode::Analytic(a), R1Mode::Analytic(b)) => a.extend(b),
            (R1Mode::Regression, R1Mode::Regression) => {}
            _ => return Err(Error::InvalidInput("cannot merge pairs with different R1 modes".into())),
        }
        match (&mut self.r2, other.r2) {
            (R2Mode::AnalyticRank1 { factors: fa, data: a }, R2Mode::AnalyticRank1 { factors: fb, data: b }) if *fa == fb => a.extend(b),
            (R2Mode::AnalyticFull(a), R2Mode::AnalyticFull(b)) => a.extend(b),
            (R2Mode::Regression, R2Mode::Regression) => {}
            _ => return Err(Error::InvalidInput("cannot merge pairs with different R2 modes".into())),
        }
        self.w.extend(other.w);
        self.w_prime.extend(other.w_prime);
        Ok(())
    }
}

/// Largest admissible ULA step (exclusive).
pub const ULA_MAX_STEP: f64 = 1.0 / std::f64::consts::E;

fn check_step(s: f64) -> Result<()> {
    if !(s > 0.0 && s < ULA_MAX_STEP) {
        return Err(Error::OutOfRange {
            name: "step",
            value: s,
            constraint: "step must satisfy 0 < s < 1/e".into(),
        });
    }
    Ok(())
}

/// `W' = W + s g(W) + sqrt(2s) Z`. `chain_samples` is flat `n x d` and should
/// come from the stationary chain. `lambda = s`, `R1 = 0`,
/// `R2 = g(W) ((s/2) g(W))^T`.
pub fn ula_pair(model: &DriftModel, s: f64, chain_samples: &[f64], seed: u64) -> Result<PairBatch> {
    check_step(s)?;
    let d = model.dim();
    if chain_samples.is_empty() || chain_samples.len() % d != 0 {
        return Err(Error::InvalidInput(format!("chain samples must be a nonempty n x {d} array")));
    }
    let n = chain_samples.len() / d;
    let mut w_prime = vec![0.0; n * d];
    let mut factors = vec![0.0; n * 2 * d];
    let mut g = vec![0.0; d];
    let scale = (2.0 * s).sqrt();
    for i in 0..n {
        let w = &chain_samples[i * d..(i + 1) * d];
        model.drift(w, &mut g);
        let mut r = rng::stream(seed, i as u64);
        for j in 0..d {
            w_prime[i * d + j] = w[j] + s * g[j] + scale * rng::normal(&mut r);
            factors[i * 2 * d + j] = g[j];
            factors[i * 2 * d + d + j] = 0.5 * s * g[j];
        }
    }
    PairBatch::new(
        d,
        chain_samples.to_vec(),
        w_prime,
        s,
        R1Mode::Analytic(vec![0.0; n * d]),
        R2Mode::AnalyticRank1 { factors: 1, data: factors },
    )
}

/// Burn-in length `ceil(20 / (theta0 s))`.
pub fn ula_burn_in(theta0: f64, s: f64) -> usize {
    (20.0 / (theta0 * s)).ceil() as usize
}

/// Largest |z| accepted by the mean-split stationarity check.
pub const GEWEKE_Z: f64 = 4.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UlaSamples {
    pub dim: usize,
    pub step: f64,
    /// Flat `n x d`, one independent chain per sample.
    pub samples: Vec<f64>,
    pub burn_in: usize,
    /// Mean-split z scores (first 10% vs last 50% of a diagnostic chain) for
    /// each coordinate and for `|x|^2`.
    pub geweke_z: Vec<f64>,
    pub stationary: bool,
}

fn ula_step(model: &DriftModel, x: &mut [f64], g: &mut [f64], s: f64, r: &mut rng::StreamRng, step: usize) -> Result<()> {
    model.drift(x, g);
    let scale = (2.0 * s).sqrt();
    for j in 0..x.len() {
        x[j] += s * g[j] + scale * rng::normal(r);
    }
    let nrm = dot(x, x).sqrt();
    if !nrm.is_finite() || nrm > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { step, norm: nrm });
    }
    Ok(())
}

/// `n` draws from the ULA chain with step `s`, each the end point of an
/// independent chain started at `x0` and run for the burn-in. A separate long
/// chain checks that the burn-in reached stationarity.
pub fn ula_stationary_samples(model: &DriftModel, theta0: f64, s: f64, x0: &[f64], n: usize, seed: u64) -> Result<UlaSamples> {
    use rayon::prelude::*;
    check_step(s)?;
    ensure_positive("theta0", theta0)?;
    let d = model.dim();
    ensure_dim("x0", d, x0.len())?;
    let burn_in = ula_burn_in(theta0, s);
    let mut samples = vec![0.0; n * d];
    samples.par_chunks_mut(d).enumerate().try_for_each(|(i, out)| -> Result<()> {
        let mut r = rng::stream(seed, i as u64);
        let mut g = vec![0.0; d];
        out.copy_from_slice(x0);
        for k in 0..burn_in {
            ula_step(model, out, &mut g, s, &mut r, k)?;
        }
        Ok(())
    })?;

    let len = (20 * burn_in).max(20_000);
    let mut r = rng::stream(rng::derive_seed(seed, 0x6e3e), 0);
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    for k in 0..burn_in {
        ula_step(model, &mut x, &mut g, s, &mut r, k)?;
    }
    let mut series = vec![Vec::with_capacity(len); d + 1];
    for k in 0..len {
        ula_step(model, &mut x, &mut g, s, &mut r, burn_in + k)?;
        for j in 0..d {
            series[j].push(x[j]);
        }
        series[d].push(dot(&x, &x));
    }
    let head = len / 10;
    let tail = len / 2;
    let mut geweke_z = Vec::with_capacity(d + 1);
    for xs in &series {
        let a = stats::batch_means(&xs[..head], 10)?;
        let b = stats::batch_means(&xs[len - tail..], 10)?;
        let se = stats::pooled_se(a.se, b.se);
        geweke_z.push(if se > 0.0 { (a.mean - b.mean) / se } else { 0.0 });
    }
    let stationary = geweke_z.iter().all(|z| z.abs() <= GEWEKE_Z);
    Ok(UlaSamples { dim: d, step: s, samples, burn_in, geweke_z, stationary })
}

/// Coordinate law for the normalized-sum pair. Both are centred with unit
/// variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CltDistribution {
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    BoundedUniform,
}

impl CltDistribution {
    pub fn sample(&self, r: &mut rng::StreamRng) -> f64 {
        match self {
            CltDistribution::Rademacher => {
                if r.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            CltDistribution::BoundedUniform => 3f64.sqrt() * (2.0 * r.random::<f64>() - 1.0),
        }
    }

    /// Almost-sure bound on `|X_i|` in dimension `d`.
    pub fn beta(&self, d: usize) -> f64 {
        match self {
            CltDistribution::Rademacher => (d as f64).sqrt(),
            CltDistribution::BoundedUniform => (3.0 * d as f64).sqrt(),
        }
    }

    /// `n x d` matrix of independent draws.
    pub fn sample_matrix(&self, n: usize, d: usize, r: &mut rng::StreamRng) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                m[(i, j)] = self.sample(r);
            }
        }
        m
    }
}

fn check_centered(x: &DMatrix<f64>, x_prime: &DMatrix<f64>) -> Result<()> {
    let n = x.nrows() * x.ncols() * 2;
    let mean = (x.sum() + x_prime.sum()) / n as f64;
    // The coordinates are assumed to have unit variance.
    if mean.abs() > 6.0 / (n as f64).sqrt() {
        return Err(Error::InvalidInput(format!(
            "sample mean {mean:.4} is inconsistent with centred unit-variance coordinates"
        )));
    }
    Ok(())
}

fn clt_structure(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let sq = (n as f64).sqrt();
    let w: Vec<f64> = (0..d).map(|j| x.column(j).sum() / sq).collect();
    let mut r2 = x.transpose() * x / n as f64;
    for j in 0..d {
        r2[(j, j)] -= 1.0;
    }
    (w, r2 * 0.5)
}

fn clt_pairs(x: &DMatrix<f64>, x_prime: &DMatrix<f64>, indices: &[usize]) -> Result<PairBatch> {
    let (n, d) = (x.nrows(), x.ncols());
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput("clt pair needs a nonempty sample".into()));
    }
    ensure_dim("X' rows", n, x_prime.nrows())?;
    ensure_dim("X' columns", d, x_prime.ncols())?;
    check_centered(x, x_prime)?;
    let (w, r2) = clt_structure(x);
    let sq = (n as f64).sqrt();
    let mut ws = Vec::with_capacity(indices.len() * d);
    let mut wp = Vec::with_capacity(indices.len() * d);
    let mut r2s = Vec::with_capacity(indices.len() * d * d);
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidInput(format!("index {i} out of range for n = {n}")));
        }
        for j in 0..d {
            ws.push(w[j]);
            wp.push(w[j] - x[(i, j)] / sq + x_prime[(i, j)] / sq);
        }
        r2s.extend_from_slice(r2.as_slice());
    }
    PairBatch::new(d, ws, wp, 1.0 / n as f64, R1Mode::Analytic(vec![0.0; indices.len() * d]), R2Mode::AnalyticFull(r2s))
}

/// `W = n^{-1/2} sum X_i`, `W' = W - X_I / sqrt(n) + X'_I / sqrt(n)` for the
/// given index `I`. `lambda = 1/n`, `R1 = 0`, `R2 = ((1/n) sum X_i X_i^T - I)/2`
/// evaluated on the realized sample.
pub fn clt_pair(x: &DMatrix<f64>, x_prime: &DMatrix<f64>, index: usize) -> Result<PairBatch> {
    clt_pairs(x, x_prime, &[index])
}

/// One pair for every index `I`; averaging over the batch is the conditional
/// expectation over `I` given the samples.
pub fn clt_pair_all(x: &DMatrix<f64>, x_prime: &DMatrix<f64>) -> Result<PairBatch> {
    let idx: Vec<usize> = (0..x.nrows()).collect();
    clt_pairs(x, x_prime, &idx)
}

/// `replicas` independent pairs, each from fresh `X`, `X'` and a uniform `I`.
pub fn clt_pair_batch(dist: CltDistribution, n: usize, d: usize, replicas: usize, seed: u64) -> Result<PairBatch> {
    if n == 0 || d == 0 || replicas == 0 {
        return Err(Error::InvalidInput("clt pair batch needs n, d, replicas >= 1".into()));
    }
    let mut out: Option<PairBatch> = None;
    for rep in 0..replicas {
        let mut r = rng::stream(seed, rep as u64);
        let x = dist.sample_matrix(n, d, &mut r);
        let xp = dist.sample_matrix(n, d, &mut r);
        let i = r.random_range(0..n);
        // Skip the centring check: the law is centred by construction.
        let (w, r2) = clt_structure(&x);
        let sq = (n as f64).sqrt();
        let wp: Vec<f64> = (0..d).map(|j| w[j] - x[(i, j)] / sq + xp[(i, j)] / sq).collect();
        let b = PairBatch::new(d, w, wp, 1.0 / n as f64, R1Mode::Analytic(vec![0.0; d]), R2Mode::AnalyticFull(r2.as_slice().to_vec()))?;
        match out.as_mut() {
            Some(o) => o.append(b)?,
            None => out = Some(b),
        }
    }
    Ok(out.expect("replicas >= 1"))
}

/// Exact `E[delta | X]` and `E[delta delta^T | X]` for the resampling pair
/// when `X'_I` is uniform on a finite `support` (centred), by enumerating every
/// `(I, X'_I)`.
pub fn clt_enumerate(x: &DMatrix<f64>, support: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = (x.nrows(), x.ncols());
    if support.is_empty() || n == 0 {
        return Err(Error::InvalidInput("enumeration needs a sample and a nonempty support".into()));
    }
    let sq = (n as f64).sqrt();
    let mut m1 = vec![0.0; d];
    let mut m2 = DMatrix::zeros(d, d);
    let count = (n * support.len()) as f64;
    for i in 0..n {
        for v in support {
            ensure_dim("support point", d, v.len())?;
            let delta: Vec<f64> = (0..d).map(|j| (v[j] - x[(i, j)]) / sq).collect();
            for a in 0..d {
                m1[a] += delta[a] / count;
                for b in 0..d {
                    m2[(a, b)] += delta[a] * delta[b] / count;
                }
            }
        }
    }
    Ok((m1, m2))
}

/// `r^3 (|log r| v 1)`, with the value 0 at `r = 0`.
pub fn cubic_log_factor(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r.powi(3) * r.ln().abs().max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub term_delta3: f64,
    pub term_r1: f64,
    pub term_r2: f64,
    pub total: f64,
    pub se_delta3: f64,
    pub se_r1: f64,
    pub se_r2: f64,
    pub se_total: f64,
    pub samples: usize,
}

fn hs_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn report(cols: [Vec<f64>; 3]) -> BoundReport {
    let n = cols[0].len();
    let total: Vec<f64> = (0..n).map(|i| cols[0][i] + cols[1][i] + cols[2][i]).collect();
    let [a, b, c] = cols.map(|v| stats::mean_se(&v));
    let t = stats::mean_se(&total);
    BoundReport {
        term_delta3: a.mean,
        term_r1: b.mean,
        term_r2: c.mean,
        total: a.mean + b.mean + c.mean,
        se_delta3: a.se,
        se_r1: b.se,
        se_r2: c.se,
        se_total: t.se,
        samples: n,
    }
}

fn delta3_column(batch: &PairBatch) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let dl = batch.delta(i);
            cubic_log_factor(dot(&dl, &dl).sqrt()) / batch.lambda
        })
        .collect()
}

/// Sample means of the three bound terms. Rank-1 `R2` uses
/// `sum_k |r_{2k-1}| |r_{2k}|`, full `R2` uses `sqrt(d) ||R2||_HS`.
pub fn bound_terms(batch: &PairBatch) -> Result<BoundReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("bound terms need a nonempty batch".into()));
    }
    let d = batch.dim;
    let n = batch.len();
    let r1: Vec<f64> = match &batch.r1 {
        R1Mode::Analytic(v) => v.chunks(d).map(|c| dot(c, c).sqrt()).collect(),
        R1Mode::Regression => return Err(Error::Unsupported("regressed R1 needs bound_terms_regressed".into())),
    };
    let r2: Vec<f64> = match &batch.r2 {
        R2Mode::AnalyticRank1 { factors, data } => data
            .chunks(2 * factors * d)
            .map(|c| (0..*factors).map(|k| dot(&c[2 * k * d..(2 * k + 1) * d], &c[2 * k * d..(2 * k + 1) * d]).sqrt() * dot(&c[(2 * k + 1) * d..(2 * k + 2) * d], &c[(2 * k + 1) * d..(2 * k + 2) * d]).sqrt()).sum())
            .collect(),
        R2Mode::AnalyticFull(_) => (0..n).map(|i| (d as f64).sqrt() * hs_norm(&batch.r2_matrix(i).expect("full"))).collect(),
        R2Mode::Regression => return Err(Error::Unsupported("regressed R2 needs bound_terms_regressed".into())),
    };
    Ok(report([delta3_column(batch), r1, r2]))
}

/// Bound terms with `R1`, `R2` replaced by the binned regression fields.
pub fn bound_terms_regressed(batch: &PairBatch, diag: &PairDiagnostics) -> Result<BoundReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("bound terms need a nonempty batch".into()));
    }
    let d = batch.dim;
    let mut r1 = Vec::with_capacity(batch.len());
    let mut r2 = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let b = &diag.bins[diag.bin_of(batch.w(i))];
        r1.push(dot(&b.r1, &b.r1).sqrt());
        r2.push((d as f64).sqrt() * dot(&b.r2, &b.r2).sqrt());
    }
    Ok(report([delta3_column(batch), r1, r2]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeabilityReport {
    /// `E[W_j^p - W'_j^p]` for `p = 1, 2, 3`, coordinate-major.
    pub statistics: Vec<MeanSe>,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// Antisymmetric moment check `E[phi(W) - phi(W')] = 0` for
/// `phi in {x, x^2, x^3}` componentwise, each within 3 SE.
pub fn exchangeability(batch: &PairBatch) -> Result<ExchangeabilityReport> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput("exchangeability check needs at least two pairs".into()));
    }
    let mut statistics = Vec::new();
    let mut max_abs_z: f64 = 0.0;
    let mut pass = true;
    for j in 0..batch.dim {
        for p in 1..=3 {
            let diffs: Vec<f64> = (0..batch.len()).map(|i| batch.w(i)[j].powi(p) - batch.w_prime(i)[j].powi(p)).collect();
            let ms = stats::mean_se(&diffs);
            let z = if ms.se > 0.0 {
                ms.mean / ms.se
            } else if ms.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_abs_z = max_abs_z.max(z.abs());
            pass &= z.abs() <= 3.0;
            statistics.push(ms);
        }
    }
    Ok(ExchangeabilityReport { statistics, max_abs_z, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub count: usize,
    /// Regressed `E[delta | W]/lambda - g(W)` over the bin.
    pub r1: Vec<f64>,
    pub r1_se: Vec<f64>,
    /// Regressed `E[delta delta^T | W]/(2 lambda) - I`, column-major.
    pub r2: Vec<f64>,
    pub r2_se: Vec<f64>,
    /// Bin averages of the declared analytic fields, when present.
    pub r1_declared: Option<Vec<f64>>,
    pub r2_declared: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub lambda_declared: f64,
    pub lambda_hat: f64,
    pub lambda_se: f64,
    pub bins_per_axis: usize,
    edges: Vec<Vec<f64>>,
    pub bins: Vec<BinStat>,
    /// Largest |z| of the regressed fields against the declared ones.
    pub max_r1_z: f64,
    pub max_r2_z: f64,
    /// Two-sided 1% Bonferroni threshold over all bin comparisons.
    pub z_critical: f64,
    pub exchangeability: ExchangeabilityReport,
    pub conforms: bool,
    pub findings: Vec<String>,
}

impl PairDiagnostics {
    fn bin_of(&self, w: &[f64]) -> usize {
        let nb = self.bins_per_axis;
        let mut flat = 0;
        for (e, wj) in self.edges.iter().zip(w).rev() {
            let k = e[1..nb].partition_point(|edge| edge <= wj);
            flat = flat * nb + k;
        }
        flat
    }
}

/// Minimum batch size for the regression diagnostics.
pub const REGRESSION_MIN_SAMPLES: usize = 1000;

/// Regress the conditional structure of a batch against `g`.
///
/// `lambda` is fitted by least squares of `delta` on `g(W)` through the
/// origin (stacked coordinates, heteroskedasticity-robust SE). The fields
/// `R1`, `R2` are bin means over an equal-width grid with `ceil(N^{1/3})`
/// bins per axis, using the declared `lambda`, and are compared bin by bin
/// with the declared analytic fields. The pair conforms when the fitted
/// `lambda` agrees with the declared one within 3 SE, every bin comparison
/// stays below the Bonferroni threshold, and the pair is exchangeable.
pub fn regress_conditional_structure(batch: &PairBatch, model: &DriftModel) -> Result<PairDiagnostics> {
    let d = batch.dim;
    ensure_dim("model dimension", d, model.dim())?;
    if d > 2 {
        return Err(Error::Unsupported(format!("regression diagnostics are limited to d <= 2 (got d = {d})")));
    }
    let n = batch.len();
    if n < REGRESSION_MIN_SAMPLES {
        return Err(Error::InvalidInput(format!("regression diagnostics need at least {REGRESSION_MIN_SAMPLES} pairs (got {n})")));
    }
    let lam = batch.lambda;
    let gs: Vec<Vec<f64>> = (0..n).map(|i| model.drift_vec(batch.w(i))).collect();
    let deltas: Vec<Vec<f64>> = (0..n).map(|i| batch.delta(i)).collect();

    let sgg: f64 = gs.iter().map(|g| dot(g, g)).sum();
    if sgg <= 0.0 {
        return Err(Error::InvalidInput("g(W) vanishes on the whole batch; lambda is not identifiable".into()));
    }
    let lambda_hat = deltas.iter().zip(&gs).map(|(dl, g)| dot(dl, g)).sum::<f64>() / sgg;
    let meat: f64 = deltas
        .iter()
        .zip(&gs)
        .map(|(dl, g)| {
            let r: Vec<f64> = dl.iter().zip(g).map(|(a, b)| a - lambda_hat * b).collect();
            dot(&r, g).powi(2)
        })
        .sum();
    let lambda_se = meat.sqrt() / sgg;

    let nb = (n as f64).cbrt().ceil() as usize;
    let edges: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(batch.w(i)[j]), hi.max(batch.w(i)[j])));
            let width = if hi > lo { (hi - lo) / nb as f64 } else { 1.0 };
            (0..=nb).map(|k| lo + k as f64 * width).collect()
        })
        .collect();
    let mut diag = PairDiagnostics {
        lambda_declared: lam,
        lambda_hat,
        lambda_se,
        bins_per_axis: nb,
        edges,
        bins: Vec::new(),
        max_r1_z: 0.0,
        max_r2_z: 0.0,
        z_critical: 0.0,
        exchangeability: exchangeability(batch)?,
        conforms: false,
        findings: Vec::new(),
    };
    let nbins = nb.pow(d as u32);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nbins];
    for i in 0..n {
        members[diag.bin_of(batch.w(i))].push(i);
    }
    let mut tests = 0usize;
    let mut r1_z: Vec<f64> = Vec::new();
    let mut r2_z: Vec<f64> = Vec::new();
    for (b, idx) in members.iter().enumerate() {
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let mut rem = b;
        for j in 0..d {
            let k = rem % nb;
            rem /= nb;
            lo[j] = diag.edges[j][k];
            hi[j] = diag.edges[j][k + 1];
        }
        let mut stat = BinStat {
            lo,
            hi,
            count: idx.len(),
            r1: vec![0.0; d],
            r1_se: vec![0.0; d],
            r2: vec![0.0; d * d],
            r2_se: vec![0.0; d * d],
            r1_declared: None,
            r2_declared: None,
        };
        if idx.len() >= 2 {
            for j in 0..d {
                let v: Vec<f64> = idx.iter().map(|&i| deltas[i][j] / lam - gs[i][j]).collect();
                let ms = stats::mean_se(&v);
                stat.r1[j] = ms.mean;
                stat.r1_se[j] = ms.se;
            }
            for c in 0..d {
                for r in 0..d {
                    let v: Vec<f64> = idx
                        .iter()
                        .map(|&i| deltas[i][r] * deltas[i][c] / (2.0 * lam) - if r == c { 1.0 } else { 0.0 })
                        .collect();
                    let ms = stats::mean_se(&v);
                    stat.r2[c * d + r] = ms.mean;
                    stat.r2_se[c * d + r] = ms.se;
                }
            }
            if let R1Mode::Analytic(_) = batch.r1 {
                let decl: Vec<f64> = (0..d).map(|j| stats::mean(&idx.iter().map(|&i| batch.r1(i).unwrap()[j]).collect::<Vec<_>>())).collect();
                if idx.len() >= 10 {
                    for j in 0..d {
                        r1_z.push(z_score(stat.r1[j] - decl[j], stat.r1_se[j]));
                    }
                    tests += d;
                }
                stat.r1_declared = Some(decl);
            }
            if !matches!(batch.r2, R2Mode::Regression) {
                let mut decl = vec![0.0; d * d];
                for &i in idx {
                    let m = batch.r2_matrix(i).unwrap();
                    for (k, v) in m.iter().enumerate() {
                        decl[k] += v / idx.len() as f64;
                    }
                }
                if idx.len() >= 10 {
                    for k in 0..d * d {
                        r2_z.push(z_score(stat.r2[k] - decl[k], stat.r2_se[k]));
                    }
                    tests += d * d;
                }
                stat.r2_declared = Some(decl);
            }
        }
        diag.bins.push(stat);
    }
    diag.z_critical = if tests > 0 {
        Normal::standard().inverse_cdf(1.0 - 0.005 / tests as f64)
    } else {
        f64::INFINITY
    };
    diag.max_r1_z = r1_z.iter().fold(0.0, |a: f64, z| a.max(z.abs()));
    diag.max_r2_z = r2_z.iter().fold(0.0, |a: f64, z| a.max(z.abs()));

    let lambda_ok = (lambda_hat - lam).abs() <= 3.0 * lambda_se;
    if !lambda_ok {
        diag.findings.push(format!(
            "fitted lambda {lambda_hat:.6} (SE {lambda_se:.2e}) disagrees with declared lambda {lam:.6}"
        ));
    }
    if diag.max_r1_z > diag.z_critical {
        diag.findings.push(format!("regressed R1 departs from the declared field (max |z| = {:.2})", diag.max_r1_z));
    }
    if diag.max_r2_z > diag.z_critical {
        diag.findings.push(format!("regressed R2 departs from the declared field (max |z| = {:.2})", diag.max_r2_z));
    }
    if !diag.exchangeability.pass {
        diag.findings.push(format!("W and W' moments differ (max |z| = {:.2})", diag.exchangeability.max_abs_z));
    }
    diag.conforms = diag.findings.is_empty();
    Ok(diag)
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_linear_model;

    #[test]
    fn cubic_log_factor_values() {
        assert_eq!(cubic_log_factor(0.0), 0.0);
        assert_eq!(cubic_log_factor(1.0), 1.0);
        assert!((cubic_log_factor(0.5) - 0.125).abs() < 1e-15);
        assert!((cubic_log_factor(0.1) - 1e-3 * 10f64.ln()).abs() < 1e-15);
        assert!((cubic_log_factor(3.0) - 27.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_bound_is_enforced() {
        let (m, _) = make_linear_model(DMatrix::identity(1, 1)).unwrap();
        let err = ula_pair(&m, 0.4, &[0.0], 1).unwrap_err();
        assert!(err.to_string().contains("s < 1/e"));
    }

    #[test]
    fn bin_lookup_is_row_consistent() {
        let (m, _) = make_linear_model(DMatrix::identity(2, 2)).unwrap();
        let mut r = rng::stream(4, 0);
        let n = 1000;
        let w: Vec<f64> = (0..2 * n).map(|_| rng::normal(&mut r)).collect();
        let b = ula_pair(&m, 0.1, &w, 5).unwrap();
        let diag = regress_conditional_structure(&b, &m).unwrap();
        for i in 0..n {
            let bin = &diag.bins[diag.bin_of(b.w(i))];
            for j in 0..2 {
                assert!(b.w(i)[j] >= bin.lo[j] - 1e-12 && b.w(i)[j] <= bin.hi[j] + 1e-12);
            }
        }
        assert_eq!(diag.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }
}
