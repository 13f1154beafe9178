//! Dense linear-algebra helpers shared by every model.
//!
//! Covariances are factored as `S = CᵀC` with `C` upper triangular. All
//! covariance-producing arithmetic is followed by symmetrization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest accepted condition-number estimate before a matrix is declared degenerate.
pub const CONDITION_LIMIT: f64 = 1e12;

/// In-place `(X + Xᵀ) / 2`.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: Matrix) -> Matrix {
    symmetrize(&mut m);
    m
}

fn check_square(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    Ok(())
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Lower Cholesky factor `L` with `S = LLᵀ`, symmetrizing the input first.
pub fn lower_cholesky(s: &Matrix) -> Result<Matrix> {
    check_square(s)?;
    if !all_finite(s) {
        return Err(Error::NonFinite("matrix"));
    }
    let chol = symmetrized(s.clone()).cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.l())
}

/// Upper-triangular `C` with `S = CᵀC`.
pub fn upper_cholesky(s: &Matrix) -> Result<Matrix> {
    Ok(lower_cholesky(s)?.transpose())
}

/// Cheap lower bound on the 2-norm condition number from a triangular factor.
pub fn condition_estimate(factor: &Matrix) -> f64 {
    let diag = factor.diagonal();
    let mut hi = 0.0f64;
    let mut lo = f64::INFINITY;
    for d in diag.iter() {
        let a = d.abs();
        hi = hi.max(a);
        lo = lo.min(a);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo) * (hi / lo)
    }
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(s: &Matrix) -> Result<Matrix> {
    check_square(s)?;
    if !all_finite(s) {
        return Err(Error::NonFinite("matrix"));
    }
    let chol = symmetrized(s.clone()).cholesky().ok_or(Error::NotPositiveDefinite)?;
    let condition = condition_estimate(&chol.l());
    if condition > CONDITION_LIMIT {
        return Err(Error::DegenerateCovariance { condition });
    }
    Ok(symmetrized(chol.inverse()))
}

/// Solve `S x = b` for SPD `S`, without the condition guard.
pub fn spd_solve(s: &Matrix, b: &Vector) -> Result<Vector> {
    check_square(s)?;
    let chol = symmetrized(s.clone()).cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

pub fn log_det_spd(s: &Matrix) -> Result<f64> {
    let l = lower_cholesky(s)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Zeros everything strictly below the diagonal.
pub fn triu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in (j + 1)..out.nrows() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// `vᵀ M v`.
pub fn quad_form(v: &Vector, m: &Matrix) -> f64 {
    v.dot(&(m * v))
}

/// Accumulates `scale · v vᵀ` into `acc`.
pub fn add_outer(acc: &mut Matrix, v: &Vector, scale: f64) {
    acc.ger(scale, v, v, 1.0);
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm()
}
