//! Linear least squares via Householder QR with column pivoting.
//!
//! Solves `min_W ‖P·W − Q‖²_F + ridge·‖W‖²_F` for a block of right-hand sides.
//! A ridge term is handled by appending `√ridge·I` rows to `P` (and zero rows
//! to `Q`), which keeps the solve in QR form instead of forming `PᵀP`.
//!
//! When `ridge == 0` and the pivoted factorization shows `|R_kk| / |R_00|`
//! below [`RANK_TOLERANCE`], the system is re-solved with
//! `ridge = RIDGE_FALLBACK_SCALE · mean(diag(PᵀP))`, which approximates the
//! minimum-norm solution deterministically.

use super::Matrix;
use crate::error::{Error, Result};

/// Pivot ratio under which `P` is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Fallback ridge, relative to the mean diagonal of `PᵀP`.
pub const RIDGE_FALLBACK_SCALE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub solution: Matrix,
    /// Numerical rank of `P` from the pivoted factorization.
    pub rank: usize,
    /// Ridge actually applied (0 for a plain full-rank solve).
    pub ridge: f64,
}

pub fn lstsq(p: &Matrix, q: &Matrix, ridge: f64) -> Result<Matrix> {
    lstsq_detailed(p, q, ridge).map(|s| s.solution)
}

pub fn lstsq_detailed(p: &Matrix, q: &Matrix, ridge: f64) -> Result<LstsqSolution> {
    if p.rows() != q.rows() {
        return Err(Error::contract(format!(
            "lstsq: P has {} rows, Q has {}",
            p.rows(),
            q.rows()
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::contract(format!(
            "lstsq: ridge must be >= 0, got {ridge}"
        )));
    }
    let n = p.cols();
    if n == 0 {
        return Ok(LstsqSolution {
            solution: Matrix::zeros(0, q.cols()),
            rank: 0,
            ridge,
        });
    }

    if ridge > 0.0 {
        let mut qr = PivotedQr::new_ridge(p, q, ridge);
        qr.factor();
        return Ok(LstsqSolution {
            solution: qr.solve(n)?,
            rank: qr.rank(),
            ridge,
        });
    }

    let mut qr = PivotedQr::new(p, q);
    qr.factor();
    let rank = qr.rank();
    if rank == n {
        return Ok(LstsqSolution {
            solution: qr.solve(n)?,
            rank,
            ridge: 0.0,
        });
    }

    let mean_diag = super::frobenius_sq(p) / n as f64;
    let fallback = RIDGE_FALLBACK_SCALE * mean_diag;
    if fallback == 0.0 {
        // P is identically zero; the minimum-norm solution is W = 0.
        return Ok(LstsqSolution {
            solution: Matrix::zeros(n, q.cols()),
            rank,
            ridge: 0.0,
        });
    }
    let mut qr = PivotedQr::new_ridge(p, q, fallback);
    qr.factor();
    Ok(LstsqSolution {
        solution: qr.solve(n)?,
        rank,
        ridge: fallback,
    })
}

/// Column-major working state for an in-place pivoted Householder QR that
/// transforms the right-hand sides alongside.
struct PivotedQr {
    m: usize,
    cols: Vec<Vec<f64>>,
    rhs: Vec<Vec<f64>>,
    perm: Vec<usize>,
    rdiag: Vec<f64>,
}

impl PivotedQr {
    fn new(p: &Matrix, q: &Matrix) -> Self {
        let cols = (0..p.cols()).map(|c| p.column(c)).collect();
        let rhs = (0..q.cols()).map(|c| q.column(c)).collect();
        Self::from_parts(p.rows(), cols, rhs)
    }

    fn new_ridge(p: &Matrix, q: &Matrix, ridge: f64) -> Self {
        let (m, n) = p.shape();
        let s = ridge.sqrt();
        let cols = (0..n)
            .map(|c| {
                let mut col = p.column(c);
                col.resize(m + n, 0.0);
                col[m + c] = s;
                col
            })
            .collect();
        let rhs = (0..q.cols())
            .map(|c| {
                let mut col = q.column(c);
                col.resize(m + n, 0.0);
                col
            })
            .collect();
        Self::from_parts(m + n, cols, rhs)
    }

    fn from_parts(m: usize, cols: Vec<Vec<f64>>, rhs: Vec<Vec<f64>>) -> Self {
        let n = cols.len();
        Self {
            m,
            cols,
            rhs,
            perm: (0..n).collect(),
            rdiag: Vec::with_capacity(n),
        }
    }

    fn factor(&mut self) {
        let n = self.cols.len();
        let steps = self.m.min(n);
        for j in 0..steps {
            let mut best = j;
            let mut best_norm = -1.0;
            for c in j..n {
                let norm: f64 = self.cols[c][j..].iter().map(|x| x * x).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = c;
                }
            }
            self.cols.swap(j, best);
            self.perm.swap(j, best);

            let norm = best_norm.sqrt();
            if norm == 0.0 {
                self.rdiag.push(0.0);
                continue;
            }
            let (head, tail) = self.cols.split_at_mut(j + 1);
            let v = &mut head[j][j..];
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|x| x * x).sum();
            self.rdiag.push(alpha);
            if vtv == 0.0 {
                continue;
            }
            let v = &*v;
            for col in tail.iter_mut().chain(self.rhs.iter_mut()) {
                let target = &mut col[j..];
                let proj: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                let f = 2.0 * proj / vtv;
                for (t, vi) in target.iter_mut().zip(v) {
                    *t -= f * vi;
                }
            }
        }
        // Columns beyond the row count have no diagonal entry.
        self.rdiag.resize(n, 0.0);
    }

    fn rank(&self) -> usize {
        let lead = self.rdiag.first().map_or(0.0, |r| r.abs());
        if lead == 0.0 {
            return 0;
        }
        self.rdiag
            .iter()
            .take_while(|r| r.abs() > RANK_TOLERANCE * lead)
            .count()
    }

    /// Back substitution on the leading `n×n` block; requires full rank.
    fn solve(&self, n: usize) -> Result<Matrix> {
        let k = self.rhs.len();
        let mut out = Matrix::zeros(n, k);
        for (c, rhs) in self.rhs.iter().enumerate() {
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let mut s = rhs[i];
                for (j, xj) in x.iter().enumerate().skip(i + 1) {
                    s -= self.cols[j][i] * xj;
                }
                let d = self.rdiag[i];
                if d == 0.0 {
                    return Err(Error::Numerical("lstsq: singular triangular factor".into()));
                }
                x[i] = s / d;
            }
            for (i, xi) in x.into_iter().enumerate() {
                out[(self.perm[i], c)] = xi;
            }
        }
        if !out.is_finite() {
            return Err(Error::Numerical("lstsq: non-finite solution".into()));
        }
        Ok(out)
    }
}
