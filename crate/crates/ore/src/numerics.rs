//! Dense linear algebra underneath every representation: unit normalization,
//! seeded Gaussian random projections, and SVD-backed hat operators giving
//! minimum-norm least-squares coefficients and residuals.
//!
//! A hat operator caches `E` with `beta = E * y` solving
//! `min_beta ||y - X beta||_2`, so per-probe work is matrix-vector only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Norm floor below which a vector is treated as degenerate (all-black patch).
pub const NORM_FLOOR: f64 = 1e-12;

// Counts every least-squares residual evaluation. Lets callers prove that a
// training loop reuses cached margins instead of re-running representations.
static RESIDUAL_EVALS: AtomicU64 = AtomicU64::new(0);

/// Total number of `ls_residual` evaluations since process start.
pub fn residual_eval_count() -> u64 {
    RESIDUAL_EVALS.load(Ordering::Relaxed)
}

/// Deterministic per-stream seed derivation (splitmix64 finalizer).
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scale `v` to unit Euclidean norm. Vectors with norm below [`NORM_FLOOR`]
/// are returned unchanged with the degenerate flag set instead of erroring,
/// so fully occluded (all-black) patches flow through the pipeline.
pub fn unit_normalize(mut v: DVector<f64>) -> (DVector<f64>, bool) {
    let norm = v.norm();
    if norm > NORM_FLOOR {
        v /= norm;
        (v, false)
    } else {
        (v, true)
    }
}

/// Seeded Gaussian random projection: a `d_out x d_in` matrix with i.i.d.
/// `N(0,1)/sqrt(d_out)` entries filled row-major from a ChaCha stream, so a
/// given seed reproduces the matrix bit-for-bit on any platform.
pub fn random_projection(d_in: usize, d_out: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d_out == 0 || d_out > d_in {
        return Err(Error::InvalidDimension {
            context: "random_projection",
            expected: d_in,
            got: d_out,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_out as f64).sqrt();
    let mut m = DMatrix::zeros(d_out, d_in);
    for r in 0..d_out {
        for c in 0..d_in {
            let g: f64 = rng.sample(StandardNormal);
            m[(r, c)] = g * scale;
        }
    }
    Ok(m)
}

/// Cached least-squares solve for a fixed basis.
///
/// `e` is the `M x d` pseudoinverse factor of the `d x M` basis, built from an
/// SVD so rank-deficient Gram matrices (duplicated columns, more columns than
/// rows) fall back to the minimum-norm solution.
#[derive(Debug, Clone, PartialEq)]
pub struct HatOperator {
    e: DMatrix<f64>,
    basis: DMatrix<f64>,
    rank: usize,
    tolerance: f64,
}

impl HatOperator {
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Ambient dimension d (rows of the basis).
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Number of basis columns M.
    pub fn columns(&self) -> usize {
        self.basis.ncols()
    }

    /// Minimum-norm least-squares coefficients and reconstruction residual
    /// `r = ||y - X beta||_2` for a probe `y`.
    pub fn ls_residual(&self, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        if y.len() != self.basis.nrows() {
            return Err(Error::InvalidDimension {
                context: "ls_residual",
                expected: self.basis.nrows(),
                got: y.len(),
            });
        }
        RESIDUAL_EVALS.fetch_add(1, Ordering::Relaxed);
        let beta = &self.e * y;
        let recon = &self.basis * &beta;
        let r = (y - recon).norm();
        Ok((beta, r))
    }

    /// Residual only; same cost as [`Self::ls_residual`].
    pub fn residual(&self, y: &DVector<f64>) -> Result<f64> {
        self.ls_residual(y).map(|(_, r)| r)
    }
}

/// Build the hat operator for a `d x M` basis.
///
/// With `tol = None` the rank cutoff defaults to
/// `max(d, M) * machine_eps * sigma_max`.
pub fn hat_operator(x: &DMatrix<f64>, tol: Option<f64>) -> Result<HatOperator> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hat_operator basis"));
    }
    let (d, m) = (x.nrows(), x.ncols());
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sv = &svd.singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let tolerance = tol.unwrap_or(d.max(m) as f64 * f64::EPSILON * sigma_max);

    let kept: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tolerance).collect();
    let rank = kept.len();

    // E = V diag(1/sigma) U^T over the retained spectrum.
    let mut e = DMatrix::zeros(m, d);
    if rank > 0 {
        let mut v_scaled = DMatrix::zeros(m, rank);
        let mut u_kept = DMatrix::zeros(d, rank);
        for (j, &i) in kept.iter().enumerate() {
            let inv = 1.0 / sv[i];
            for row in 0..m {
                v_scaled[(row, j)] = v_t[(i, row)] * inv;
            }
            for row in 0..d {
                u_kept[(row, j)] = u[(row, i)];
            }
        }
        e = v_scaled * u_kept.transpose();
    }

    Ok(HatOperator {
        e,
        basis: x.clone(),
        rank,
        tolerance,
    })
}
