//! Dense-matrix references for the skeleton spectrum.

use handgcat_core::hand_graph::NUM_JOINTS;
use nalgebra::{DMatrix, SymmetricEigen};

pub const N: usize = NUM_JOINTS;

pub fn dmat(v: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

pub fn eigenvalues(v: &[f64], n: usize) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(dmat(v, n)).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Dense Chebyshev matrices from the three-term recurrence.
pub fn dense_chebyshev(l: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    let n = l.nrows();
    let mut t = vec![DMatrix::identity(n, n)];
    if k > 1 {
        t.push(l.clone());
    }
    for i in 2..k {
        let next = 2.0 * l * &t[i - 1] - &t[i - 2];
        t.push(next);
    }
    t
}
