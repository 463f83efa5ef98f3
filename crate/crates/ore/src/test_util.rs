//! Shared helpers for unit tests. The residual oracle here is deliberately
//! independent of the SVD path in `numerics`: it orthonormalizes the basis by
//! modified Gram-Schmidt and projects, so the two routes can check each other.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// `d x m` matrix with unit-normalized Gaussian columns.
pub(crate) fn random_matrix<R: Rng>(rng: &mut R, d: usize, m: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..m).map(|_| random_unit_vector(rng, d)).collect();
    DMatrix::from_columns(&cols)
}

pub(crate) fn random_unit_vector<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Least-squares residual of `y` against the column span of `x`, computed by
/// modified Gram-Schmidt orthonormalization and explicit projection.
pub(crate) fn gram_schmidt_residual(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let basis = gram_schmidt_basis(x);
    let mut residual = y.clone();
    for q in &basis {
        let coeff = q.dot(&residual);
        residual -= q * coeff;
    }
    residual.norm()
}

/// Orthonormal basis for the column span of `x` (modified Gram-Schmidt with
/// re-orthogonalization; near-dependent columns are dropped).
pub(crate) fn gram_schmidt_basis(x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let scale = x
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    for col in x.column_iter() {
        let mut v = col.into_owned();
        for _ in 0..2 {
            for q in &basis {
                let coeff = q.dot(&v);
                v -= q * coeff;
            }
        }
        let n = v.norm();
        if n > 1e-10 * scale {
            basis.push(v / n);
        }
    }
    basis
}
