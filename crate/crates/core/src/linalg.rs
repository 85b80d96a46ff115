//! Small dense helpers shared by the model, instrumentation and verification code.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

use crate::scalar::Scalar;

pub(crate) const PAR: Par = Par::Seq;

/// `lhs * rhs` without parallelism.
pub(crate) fn mul<T: Scalar>(lhs: MatRef<'_, T>, rhs: MatRef<'_, T>) -> Mat<T> {
    let mut out = Mat::<T>::zeros(lhs.nrows(), rhs.ncols());
    matmul(out.as_mut(), Accum::Replace, lhs, rhs, T::one(), PAR);
    out
}

/// Symmetric product `aᵀa` (full matrix, computed from the lower triangle).
pub fn gram(a: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = gram_lower(a);
    mirror_lower(&mut out);
    out
}

/// Lower triangle (including the diagonal) of `aᵀa`; the strict upper part is zero.
pub(crate) fn gram_lower(a: MatRef<'_, f64>) -> Mat<f64> {
    let k = a.ncols();
    let mut out = Mat::<f64>::zeros(k, k);
    triangular::matmul(
        out.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        a.transpose(),
        BlockStructure::Rectangular,
        a,
        BlockStructure::Rectangular,
        1.0,
        PAR,
    );
    out
}

/// Symmetric product `a aᵀ`.
pub fn outer_gram(a: MatRef<'_, f64>) -> Mat<f64> {
    gram(a.transpose())
}

pub(crate) fn mirror_lower(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(j, i)] = m[(i, j)];
        }
    }
}

pub fn widen<T: Scalar>(m: MatRef<'_, T>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let dst = out.col_as_slice_mut(j);
        match col_slice(m, j) {
            Some(col) => dst.iter_mut().zip(col).for_each(|(o, &x)| *o = x.widen()),
            None => dst.iter_mut().enumerate().for_each(|(i, o)| *o = m[(i, j)].widen()),
        }
    }
    out
}

/// Subtracts each column's mean (applies `I - 11ᵀ/n` from the left).
pub fn center_rows<T: Scalar>(m: MatRef<'_, T>) -> Mat<T> {
    let n = m.nrows();
    let mut out = m.to_owned();
    if n == 0 {
        return out;
    }
    let inv_n = T::lift(1.0 / n as f64);
    for j in 0..out.ncols() {
        let col = out.col_as_slice_mut(j);
        let mean = col.iter().fold(T::zero(), |acc, &x| acc + x) * inv_n;
        for x in col.iter_mut() {
            *x = *x - mean;
        }
    }
    out
}

/// Column `j` as a slice when the view is column-major.
#[inline]
pub(crate) fn col_slice<'a, T>(m: MatRef<'a, T>, j: usize) -> Option<&'a [T]> {
    m.try_as_col_major().map(|c| c.col(j).as_slice())
}

pub fn frobenius<T: Scalar>(m: MatRef<'_, T>) -> f64 {
    let mut acc = 0.0f64;
    for j in 0..m.ncols() {
        match col_slice(m, j) {
            Some(col) => {
                for &x in col {
                    let x = x.widen();
                    acc += x * x;
                }
            }
            None => {
                for i in 0..m.nrows() {
                    let x = m[(i, j)].widen();
                    acc += x * x;
                }
            }
        }
    }
    acc.sqrt()
}

pub(crate) fn all_finite<T: Scalar>(m: MatRef<'_, T>) -> bool {
    (0..m.ncols()).all(|j| match col_slice(m, j) {
        Some(col) => col.iter().all(|x| x.is_finite()),
        None => (0..m.nrows()).all(|i| m[(i, j)].is_finite()),
    })
}

/// Concatenates the columns of `m`, widened to f64.
pub fn flatten_col_major<T: Scalar>(m: &Mat<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for j in 0..m.ncols() {
        out.extend(m.col_as_slice(j).iter().map(|x| x.widen()));
    }
    out
}

/// Flattens a matrix in row-major order.
pub fn flatten_row_major(m: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
