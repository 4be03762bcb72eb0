//! Small bridges between `ndarray` batch data and `nalgebra` factorizations.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

pub(crate) fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Lower Cholesky factor, or `None` if the matrix is not positive definite.
pub(crate) fn cholesky_lower(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    to_dmatrix(a).cholesky().map(|c| from_dmatrix(&c.l()))
}

/// Ratio of the largest to the smallest singular value.
pub(crate) fn condition_number(a: ArrayView2<'_, f64>) -> f64 {
    let sv = to_dmatrix(a).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
pub(crate) fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
