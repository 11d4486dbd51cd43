//! Small complex linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Reciprocal condition number of a Hermitian positive semidefinite matrix,
/// `lambda_min / lambda_max`. Returns 0 for the zero matrix.
pub fn hermitian_rcond(m: &CMatrix) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l.abs());
    }
    if hi == 0.0 {
        0.0
    } else {
        (lo / hi).max(0.0)
    }
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn frobenius_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Real part of the trace.
pub fn trace_re(m: &CMatrix) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)].re).sum()
}

/// `row * m * row^H` for a row vector given as a slice.
pub fn quadratic_form(row: &[Complex64], m: &CMatrix) -> Complex64 {
    let n = row.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let mut inner = Complex64::new(0.0, 0.0);
        for j in 0..n {
            inner += m[(i, j)] * row[j].conj();
        }
        acc += row[i] * inner;
    }
    acc
}

/// Largest entrywise deviation from Hermitian symmetry.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}
