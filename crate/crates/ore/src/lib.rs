//! Optimal representation ensembles for occlusion-robust recognition.
//!
//! The pipeline: random rectangular patches are cropped from aligned
//! grayscale images, projected to a low dimension, and represented by
//! per-class least squares. Each patch's residual vector becomes a class
//! posterior; an exp-loss, `l1`-bounded ensemble over those posteriors is
//! learned on leave-one-out margins, either directly or by column-generation
//! boosting. At inference a pooled all-class basis scores how face-like each
//! patch still is, discounting occluded regions.
//!
//! Modules follow the pipeline order: [`numerics`] (projections, hat
//! operators), [`patch`] (sampling, galleries), [`bpr`] (posteriors and
//! generic-face confidence), [`margins`] (leave-one-out margin matrix),
//! [`learn`] (direct solver and model selection), [`boost`]
//! (column-generation variant), [`inference`], [`baselines`], [`data`]
//! (loading, synthesis, occlusion), and [`experiment`] (orchestration).

pub mod baselines;
pub mod boost;
pub mod bpr;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod learn;
pub mod margins;
pub mod numerics;
pub mod patch;

mod par;
#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
