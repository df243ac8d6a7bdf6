//! Minimal dense linear algebra shared by every other module: row-major
//! matrices, row-wise softmax and L2 normalization, maximum-likelihood
//! Gaussian fitting, the standard-normal quantile and spectral-norm
//! estimation by power iteration.
//!
//! All arithmetic is double precision. Values are immutable after
//! construction and safe to share across threads.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense 2-D array of finite real values in row-major order.
///
/// Construction rejects NaN and infinities so downstream operations never
/// have to re-check finiteness.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major entries, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows entry count")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {expected} entries, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a closure over (row, col); the closure must produce finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
            return Err(Error::Shape(format!("row {i} has {} entries, expected {c}", row.len())));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute entrywise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Standard matrix product; `a.cols` must equal `b.rows`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out = &mut data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::new(a.rows, b.cols, data)
}

/// Row-wise softmax with per-row max subtraction for stability.
///
/// Every output row is nonnegative and sums to 1 within 1e-12.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut data = vec![0.0; z.data.len()];
    for i in 0..z.rows {
        let row = z.row(i);
        if row.is_empty() {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * z.cols..(i + 1) * z.cols];
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Matrix { rows: z.rows, cols: z.cols, data }
}

/// Scale each row to unit Euclidean norm; all-zero rows pass through unchanged.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut data = m.data.clone();
    for i in 0..m.rows {
        let out = &mut data[i * m.cols..(i + 1) * m.cols];
        let peak = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        // Scale by the peak first so the norm never under- or overflows.
        let norm = out.iter().map(|v| (v / peak) * (v / peak)).sum::<f64>().sqrt() * peak;
        for o in out.iter_mut() {
            *o /= norm;
        }
    }
    Matrix { rows: m.rows, cols: m.cols, data }
}

/// Maximum-likelihood univariate Gaussian fit (variance divided by m, not m-1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

/// Fit mean and population standard deviation to a nonempty sample list.
pub fn gaussian_fit(samples: &[f64]) -> Result<GaussianFit> {
    if samples.is_empty() {
        return Err(Error::Argument("gaussian_fit needs at least one sample".into()));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("non-finite sample {bad}")));
    }
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    Ok(GaussianFit { mean, std: var.sqrt(), sample_count: samples.len() })
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// erf on [0, 3] via the positive-term confluent series; no cancellation.
fn erf_series(x: f64) -> f64 {
    let two_x2 = 2.0 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 0u32;
    while term > 1e-18 * sum {
        n += 1;
        term *= two_x2 / (2.0 * f64::from(n) + 1.0);
        sum += term;
    }
    2.0 * x * (-x * x).exp() * sum / std::f64::consts::PI.sqrt()
}

/// erfc for x > 3 via the classical continued fraction (modified Lentz).
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0;
    for n in 1..200 {
        // a_1 = 1, a_n = (n-1)/2 for n >= 2; all b_n = x.
        let a = if n == 1 { 1.0 } else { (f64::from(n) - 1.0) / 2.0 };
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() * f / std::f64::consts::PI.sqrt()
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x <= 3.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Standard normal CDF, accurate to near machine precision in absolute terms.
pub fn normal_cdf(z: f64) -> f64 {
    // erfc on the nonnegative axis avoids cancellation in both tails.
    if z < 0.0 {
        0.5 * erfc(-z / SQRT_2)
    } else {
        1.0 - 0.5 * erfc(z / SQRT_2)
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

// Acklam's rational approximation to the inverse normal CDF (|error| < 1.2e-9),
// used as the starting point for one Newton refinement.
fn quantile_initial(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Inverse standard-normal CDF: z with Phi(z) = p, absolute accuracy <= 1e-8.
///
/// Rational approximation refined by one Newton step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("quantile probability {p} outside (0, 1)")));
    }
    let z = quantile_initial(p);
    let err = normal_cdf(z) - p;
    Ok(z - err / normal_pdf(z))
}

/// Power-iteration estimate of the largest singular value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    /// Last singular-value estimate; a lower bound on the true norm.
    pub value: f64,
    /// Whether successive estimates got within the relative tolerance.
    pub converged: bool,
    pub iterations: usize,
}

pub const SPECTRAL_MAX_ITERS: usize = 200;
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Largest singular value via power iteration on `m`ᵀ`m`.
///
/// The start vector is all-ones normalized, so runs are reproducible.
/// Non-convergence within `max_iters` is flagged, not fatal; the last
/// estimate is returned either way.
pub fn spectral_norm(m: &Matrix, max_iters: usize, tol: f64) -> SpectralEstimate {
    if m.rows == 0 || m.cols == 0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    let fro = m.frobenius_norm();
    if fro == 0.0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    let n = m.cols;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut prev = f64::NAN;
    let mut last = 0.0;
    let mut restart_col = 0;
    for it in 1..=max_iters {
        // w = m v, sigma = |w| (v is unit), then v <- normalized mᵀ w.
        let mut w = vec![0.0; m.rows];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(m.row(i), &v);
        }
        let sigma = norm2(&w);
        if sigma <= fro * 1e-300 {
            // v landed in the null space; restart from a basis vector.
            if restart_col >= n {
                return SpectralEstimate { value: 0.0, converged: true, iterations: it };
            }
            v = vec![0.0; n];
            v[restart_col] = 1.0;
            restart_col += 1;
            prev = f64::NAN;
            continue;
        }
        let mut u = vec![0.0; n];
        for (i, &wi) in w.iter().enumerate() {
            for (uj, &mij) in u.iter_mut().zip(m.row(i)) {
                *uj += mij * wi;
            }
        }
        let un = norm2(&u);
        for x in &mut u {
            *x /= un;
        }
        v = u;
        last = sigma;
        if prev.is_finite() && (sigma - prev).abs() <= tol * sigma {
            return SpectralEstimate { value: sigma, converged: true, iterations: it };
        }
        prev = sigma;
    }
    SpectralEstimate { value: last, converged: false, iterations: max_iters }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
