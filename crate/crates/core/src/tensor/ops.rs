use super::Matrix;
use crate::error::{Error, Result};

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::contract(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(b.row(p)) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::contract(format!(
            "matmul_transb: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_transa(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::contract(format!(
            "matmul_transa: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for p in 0..a.rows() {
        let b_row = b.row(p);
        for (i, &a_pi) in a.row(p).iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            for (o, &b_pj) in out.row_mut(i).iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    Ok(out)
}

/// Matrix-vector product `a · x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols() != x.len() {
        return Err(Error::contract(format!(
            "matvec: {:?} x {}",
            a.shape(),
            x.len()
        )));
    }
    Ok((0..a.rows()).map(|r| dot(a.row(r), x)).collect())
}

/// `aᵀ · x`.
pub fn matvec_trans(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != x.len() {
        return Err(Error::contract(format!(
            "matvec_trans: {:?}ᵀ x {}",
            a.shape(),
            x.len()
        )));
    }
    let mut out = vec![0.0; a.cols()];
    for (r, &xr) in x.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(a.row(r)) {
            *o += xr * v;
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of squared elements.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum()
}

/// Frobenius inner product `Σ a_ij b_ij`.
pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "frobenius_dot: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// Temperature softmax of a single vector: `softmax(z / temperature)`.
pub fn softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out, temperature);
    Ok(out)
}

/// Row-wise temperature softmax.
pub fn softmax_rows(a: &Matrix, temperature: f64) -> Result<Matrix> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = a.clone();
    if out.cols() > 0 {
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), temperature);
        }
    }
    Ok(out)
}

/// Softmax with max subtraction. Entries equal to `-inf` get probability 0.
pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax at a temperature, used by the distillation loss.
pub fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

/// Per-token statistics kept by [`layernorm_with_stats`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    /// Normalized input before the affine transform.
    pub normalized: Matrix,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the embedding axis (columns) of each token (row).
pub fn layernorm(x: &Matrix, gain: &[f64], shift: &[f64], eps: f64) -> Result<Matrix> {
    layernorm_with_stats(x, gain, shift, eps).map(|(y, _)| y)
}

pub fn layernorm_with_stats(
    x: &Matrix,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormStats)> {
    let d = x.cols();
    if gain.len() != d || shift.len() != d {
        return Err(Error::contract(format!(
            "layernorm: gain/shift lengths {}/{} for embedding dim {d}",
            gain.len(),
            shift.len()
        )));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let n = (row[c] - mean) * inv;
            normalized[(r, c)] = n;
            y[(r, c)] = gain[c] * n + shift[c];
        }
    }
    Ok((
        y,
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
