//! Numerical building blocks: mergeable moment accumulators, the
//! Kolmogorov-Smirnov machinery, least squares fits and small symmetric
//! matrix helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{mix64, unit_f64};

/// Exact first and second moments of integer vectors. Merging is exact, so
/// any split and merge order gives identical results.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMoments {
    pub count: u64,
    pub sum: Vec<i128>,
    /// Row-major `Σ v vᵀ`.
    pub cross: Vec<i128>,
}

impl IntMoments {
    pub fn new(dim: usize) -> IntMoments {
        IntMoments { count: 0, sum: vec![0; dim], cross: vec![0; dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn push(&mut self, v: &[i64]) {
        let d = self.dim();
        debug_assert_eq!(v.len(), d);
        self.count += 1;
        for i in 0..d {
            self.sum[i] += v[i] as i128;
            for j in 0..d {
                self.cross[i * d + j] += v[i] as i128 * v[j] as i128;
            }
        }
    }

    pub fn merge(&mut self, other: &IntMoments) {
        if self.dim() == 0 && self.count == 0 {
            *self = other.clone();
            return;
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.cross.iter_mut().zip(&other.cross).for_each(|(a, b)| *a += b);
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sum.iter().map(|&s| s as f64 / n).collect()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.count as f64;
        DMatrix::from_fn(d, d, |i, j| {
            if self.count < 2 {
                return 0.0;
            }
            // n Σxy - Σx Σy is exact in i128
            let num = self.count as i128 * self.cross[i * d + j] - self.sum[i] * self.sum[j];
            num as f64 / (n * (n - 1.0))
        })
    }
}

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RealMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RealMoments {
    pub fn from_slice(xs: &[f64]) -> RealMoments {
        let mut m = RealMoments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RealMoments) {
        if other.count == 0 {
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.mean += delta * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided one-sample KS statistic `sup |F_n - F|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value `c(α)` with `P(√n·D > c) ≈ α`.
pub fn ks_critical(alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt()
}

/// Deterministic `U(-1/2, 1/2)` offset for sample `index`, used to smooth
/// lattice-valued data before a continuous goodness-of-fit test.
pub fn lattice_jitter(salt: u64, index: u64) -> f64 {
    unit_f64(mix64(salt ^ mix64(index))) - 0.5
}

/// Linear interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares `y = a + b x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::InsufficientData(format!("linear fit needs two or more points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("linear fit with constant abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_se = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LinearFit { slope, intercept, r_squared, slope_se, points: n })
}

/// Symmetrize and return eigenvalues in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `M^{-1/2}` of a symmetric positive definite matrix.
pub fn inverse_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-12 * scale)) {
        return Err(Error::Numerical(format!("matrix is not positive definite: eigenvalues {:?}", eig.eigenvalues.as_slice())));
    }
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// `M^{1/2}` of a symmetric positive semidefinite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

/// Sample covariance (unbiased) and mean of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Per-entry standard errors of the sample covariance, from the variance of
/// the centered products.
pub fn covariance_standard_errors(rows: &[Vec<f64>], mean: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    DMatrix::from_fn(d, d, |i, j| {
        let m = RealMoments::from_slice(&rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).collect::<Vec<_>>());
        m.std_error()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_hand_case() {
        let xs: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.1).abs() < 1e-12, "{d}");
    }

    #[test]
    fn ks_critical_value() {
        // tabulated asymptotic value for α = 0.05 is 1.358
        assert!((ks_critical(0.05) - 1.3581).abs() < 1e-3);
    }

    #[test]
    fn int_moments_merge_in_any_order() {
        let data: Vec<Vec<i64>> = (0..200).map(|i| vec![(i * 7919) % 23 - 11, (i * 104729) % 17 - 8]).collect();
        let mut whole = IntMoments::new(2);
        data.iter().for_each(|v| whole.push(v));
        for split in [1, 37, 100, 199] {
            let (mut a, mut b) = (IntMoments::new(2), IntMoments::new(2));
            data[..split].iter().for_each(|v| a.push(v));
            data[split..].iter().for_each(|v| b.push(v));
            let mut ab = a.clone();
            ab.merge(&b);
            let mut ba = b;
            ba.merge(&a);
            assert_eq!(ab, whole);
            assert_eq!(ba, whole);
        }
        let cov = whole.covariance();
        let rows: Vec<Vec<f64>> = data.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let (_, direct) = sample_covariance(&rows);
        assert!((cov - direct).amax() < 1e-9);
    }

    #[test]
    fn real_moments_merge() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.37).sin()).collect();
        let whole = RealMoments::from_slice(&xs);
        let mut a = RealMoments::from_slice(&xs[..313]);
        a.merge(&RealMoments::from_slice(&xs[313..]));
        assert_eq!(a.count, whole.count);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.variance() - whole.variance()).abs() < 1e-12);
    }

    #[test]
    fn fit_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn matrix_roots() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_psd(&m);
        assert!((&r * &r - &m).amax() < 1e-12);
        let w = inverse_sqrt(&m).unwrap();
        assert!((&w * &m * &w - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(inverse_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn quantiles() {
        let xs = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&xs), 2.5);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-3);
        assert!((normal_quantile(0.975) - 1.96).abs() < 1e-2);
    }

    #[test]
    fn jitter_is_uniform_and_deterministic() {
        let xs: Vec<f64> = (0..20_000).map(|i| lattice_jitter(5, i)).collect();
        assert_eq!(xs[17], lattice_jitter(5, 17));
        let d = ks_statistic(&xs, |x| (x + 0.5).clamp(0.0, 1.0));
        assert!(d * (xs.len() as f64).sqrt() < ks_critical(0.001));
    }
}
