//! Sample statistics shared by the estimators and experiments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2) + slack`.
    pub fn agrees_with(&self, other: &MeanSe, k: f64, slack: f64) -> bool {
        (self.mean - other.mean).abs() <= k * pooled_se(self.se, other.se) + slack
    }

    pub fn agrees_with_value(&self, value: f64, k: f64, slack: f64) -> bool {
        (self.mean - value).abs() <= k * self.se + slack
    }
}

pub fn pooled_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    MeanSe {
        mean: mean(xs),
        se: (variance(xs) / n.max(1) as f64).sqrt(),
        n,
    }
}

/// Mean and SE from non-overlapping batch means of a correlated series.
pub fn batch_means(xs: &[f64], batches: usize) -> Result<MeanSe> {
    if batches < 2 || xs.len() < batches {
        return Err(Error::InvalidInput(format!(
            "batch means needs at least 2 batches and one sample per batch (got {} samples, {} batches)",
            xs.len(),
            batches
        )));
    }
    let len = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * len..(b + 1) * len])).collect();
    let out = mean_se(&means);
    Ok(MeanSe { n: xs.len(), ..out })
}

/// Row-major `n x k` matrix of per-replica outputs. Each replica fills its own
/// row, so assembling it in parallel is deterministic.
#[derive(Clone, Debug)]
pub struct SampleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SampleMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn column_mean_se(&self, j: usize) -> MeanSe {
        mean_se(&self.column(j))
    }

    /// Mean and SE of the per-replica linear combination `sum_j c_j * col_j`.
    pub fn combination_mean_se(&self, coeffs: &[(usize, f64)]) -> MeanSe {
        let v: Vec<f64> = (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                coeffs.iter().map(|&(j, c)| c * r[j]).sum()
            })
            .collect();
        mean_se(&v)
    }

    /// Control-variate estimate of the mean of column `target` using
    /// zero-mean columns `controls`; the coefficients are fitted by least
    /// squares and the SE includes the degrees-of-freedom correction.
    pub fn controlled_mean_se(&self, target: usize, controls: &[usize]) -> MeanSe {
        let y = self.column(target);
        controlled_mean_se(&y, &controls.iter().map(|&c| self.column(c)).collect::<Vec<_>>())
    }
}

pub fn controlled_mean_se(y: &[f64], controls: &[Vec<f64>]) -> MeanSe {
    let n = y.len();
    let q = controls.len();
    if q == 0 || n <= q + 2 {
        return mean_se(y);
    }
    let ym = mean(y);
    let cm: Vec<f64> = controls.iter().map(|c| mean(c)).collect();
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for i in 0..n {
        for a in 0..q {
            let ca = controls[a][i] - cm[a];
            rhs[a] += ca * (y[i] - ym);
            for b in 0..=a {
                gram[(a, b)] += ca * (controls[b][i] - cm[b]);
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => return mean_se(y),
    };
    // The controls have exact mean zero, so the adjusted mean subtracts
    // beta . (sample mean of the controls).
    let adj: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..q).map(|a| beta[a] * controls[a][i]).sum::<f64>())
        .collect();
    let m = mean(&adj);
    let var = variance(&adj) * (n - 1) as f64 / (n - q - 1) as f64;
    MeanSe { mean: m, se: (var / n as f64).sqrt(), n }
}

/// Fill a sample matrix in parallel. `init` builds per-worker scratch state
/// and `fill(scratch, replica, row)` writes one replica's outputs.
pub fn par_fill<S, I, F>(rows: usize, cols: usize, init: I, fill: F) -> Result<SampleMatrix>
where
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [f64]) -> Result<()> + Sync + Send,
{
    let mut m = SampleMatrix::zeros(rows, cols);
    if cols == 0 {
        return Ok(m);
    }
    m.data
        .par_chunks_mut(cols)
        .enumerate()
        .try_for_each_init(&init, |s, (i, row)| fill(s, i, row))?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::InvalidInput("linear fit needs at least two (x, y) pairs".into()));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidInput("linear fit needs distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = y - intercept - slope * x;
                r * r
            })
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_se })
}

/// Fit `y ~ C x^slope` on positive data.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("log-log fit needs strictly positive data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_variance() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn loglog_recovers_power() {
        let xs = [0.25, 0.5, 1.0, 2.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        let fit = loglog_fit(&xs, &ys).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn control_variate_removes_exact_linear_noise() {
        let c: Vec<f64> = (0..200).map(|i| ((i * 37 % 101) as f64 - 50.0) / 10.0).collect();
        let y: Vec<f64> = c.iter().map(|v| 2.0 + 3.0 * v).collect();
        let est = controlled_mean_se(&y, &[c.clone()]);
        assert!((est.mean - (2.0 + 3.0 * mean(&c) - 3.0 * mean(&c))).abs() < 1e-10);
        assert!(est.se < 1e-10);
    }

    #[test]
    fn par_fill_is_row_addressed() {
        let m = par_fill(10, 2, || (), |_, i, row| {
            row[0] = i as f64;
            row[1] = 2.0 * i as f64;
            Ok(())
        })
        .unwrap();
        assert_eq!(m.column(1)[7], 14.0);
    }
}
