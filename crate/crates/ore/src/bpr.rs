//! Bayesian patch representations: reconstruction residuals per class turned
//! into a posterior over classes, plus the pooled-basis generic-face
//! confidence that discounts contaminated patches.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::patch::PatchGallery;

/// Variance floor. The per-patch variance is a fraction of the smallest
/// squared residual, which is zero for perfectly represented patches; the
/// floor realizes that limit as an indicator instead of dividing by zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Everything one patch says about a probe.
#[derive(Debug, Clone)]
pub struct BprOutput {
    /// Patch index t.
    pub t: usize,
    /// Per-class reconstruction residuals, in `[0, 1]` for unit-norm patches.
    pub residuals: Vec<f64>,
    /// Class posterior on the simplex.
    pub posterior: Vec<f64>,
    /// Residual against the pooled all-class basis, when evaluated.
    pub generic_residual: Option<f64>,
    /// Generic-face confidence in `(0, 1]`, when evaluated.
    pub gfc: Option<f64>,
}

/// Residual of the probe feature against each class basis of one patch.
pub fn patch_residuals(gallery: &PatchGallery, y_t: &DVector<f64>) -> Result<Vec<f64>> {
    gallery
        .per_class
        .iter()
        .map(|op| op.residual(y_t))
        .collect()
}

/// Posterior for a residual vector with an explicit variance.
pub fn posterior_with_variance(residuals: &[f64], delta: f64) -> Vec<f64> {
    // Log-space softmax of -r^2/delta.
    let logits: Vec<f64> = residuals.iter().map(|r| -(r * r) / delta).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter().map(|w| w / sum).collect()
}

/// Class posterior from residuals: softmax of `-r^2 / delta` with the
/// adaptive variance `delta = max(0.1 * min_k r_k^2, floor)`.
pub fn bpr_posterior(residuals: &[f64]) -> Vec<f64> {
    let min_sq = residuals
        .iter()
        .map(|r| r * r)
        .fold(f64::INFINITY, f64::min);
    let delta = (0.1 * min_sq).max(VARIANCE_FLOOR);
    posterior_with_variance(residuals, delta)
}

/// Residual against the pooled all-class basis of the patch.
pub fn generic_residual(gallery: &PatchGallery, y_t: &DVector<f64>) -> Result<f64> {
    gallery.pooled.residual(y_t)
}

/// Generic-face confidences with an explicit variance.
pub fn gfc_with_variance(generic_residuals: &[f64], delta: f64) -> Vec<f64> {
    generic_residuals
        .iter()
        .map(|r| (-(r * r) / delta).exp())
        .collect()
}

/// Generic-face confidence per patch: `exp(-r~^2 / delta~)` with
/// `delta~ = max(0.05 * mean(r~)^2, floor)` over the evaluated patches.
pub fn gfc(generic_residuals: &[f64]) -> Result<Vec<f64>> {
    if generic_residuals.is_empty() {
        return Err(Error::InvalidArgument(
            "gfc needs at least one generic residual".into(),
        ));
    }
    let mean = generic_residuals.iter().sum::<f64>() / generic_residuals.len() as f64;
    let delta = (0.05 * mean * mean).max(VARIANCE_FLOOR);
    Ok(gfc_with_variance(generic_residuals, delta))
}

/// Robust posterior: the plain posterior scaled by the patch's confidence.
/// The output sums to `gfc_t`; no renormalization, so a discounted patch
/// contributes less to the ensemble sum.
pub fn robust_bpr(posterior: &[f64], gfc_t: f64) -> Vec<f64> {
    posterior.iter().map(|b| b * gfc_t).collect()
}

/// Full per-patch evaluation of a probe feature.
pub fn evaluate_patch(
    gallery: &PatchGallery,
    y_t: &DVector<f64>,
    with_generic: bool,
) -> Result<BprOutput> {
    let residuals = patch_residuals(gallery, y_t)?;
    let posterior = bpr_posterior(&residuals);
    let generic = if with_generic {
        Some(generic_residual(gallery, y_t)?)
    } else {
        None
    };
    Ok(BprOutput {
        t: gallery.spec.id,
        residuals,
        posterior,
        generic_residual: generic,
        gfc: None,
    })
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
