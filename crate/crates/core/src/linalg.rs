//! Small dense-matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Row-major construction; every row must have the same length.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidParameter("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Ratio of largest to smallest singular value; infinite when singular.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of the symmetric part `(M + M^T) / 2`.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `out = m * x` for a square `m`.
#[inline]
pub fn matvec_into(m: &Mat, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    for (i, slot) in out.iter_mut().enumerate().take(r) {
        let mut acc = 0.0;
        for j in 0..c {
            acc += m[(i, j)] * x[j];
        }
        *slot = acc;
    }
}

pub fn matvec(m: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    matvec_into(m, x, &mut out);
    out
}

/// `out = m^T * x`.
#[inline]
pub fn matvec_t_into(m: &Mat, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    for (j, slot) in out.iter_mut().enumerate().take(c) {
        let mut acc = 0.0;
        for i in 0..r {
            acc += m[(i, j)] * x[i];
        }
        *slot = acc;
    }
}

/// Matrix exponential through the eigen-free scaling-and-squaring Taylor
/// series; adequate for the small, well-scaled matrices used as oracles.
pub fn expm(m: &Mat) -> Mat {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
    let squarings = (norm.log2().ceil().max(0.0) as u32) + 4;
    let scaled = m / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
