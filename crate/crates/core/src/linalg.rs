//! Small dense helpers shared by the GP, controller and feasibility code.

use nalgebra::{DMatrix, DVector};

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetric PSD square root through an eigendecomposition, with eigenvalues
/// clamped from below at `floor`.
pub fn sym_sqrt(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(floor).sqrt());
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose()))
}

/// Smallest eigenvalue of a symmetric matrix and its unit eigenvector.
pub fn min_eigenpair(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = symmetrize(a).symmetric_eigen();
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty matrix");
    (val, eig.eigenvectors.column(idx).into_owned())
}

/// `[1, u]`.
pub fn augment(u: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(u.len() + 1);
    y[0] = 1.0;
    y.rows_mut(1, u.len()).copy_from(u);
    y
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
