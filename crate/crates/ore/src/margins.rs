//! Leave-one-out margin matrix.
//!
//! For every training sample the representation basis of its own class is
//! rebuilt with that sample's column removed; the other classes keep their
//! cached operators. The resulting posterior gap `b_{t,l_i} - 1/K` per patch
//! is the margin entry `theta[t][i]`, and row t is the oracle vector reused
//! throughout learning and boosting without touching residuals again.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::bpr::{argmax, bpr_posterior};
use crate::error::{Error, Result};
use crate::numerics::hat_operator;
use crate::par;
use crate::patch::{class_members, crop_vectorize, FaceImage, GallerySet};

/// Margins and the full leave-one-out posteriors behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    /// `T x N`: `theta[t][i] = b_{t, l_i}(x_i) - 1/K`, leave-one-out.
    theta: DMatrix<f64>,
    /// Per patch: `K x N` leave-one-out posteriors, kept for training-error
    /// evaluation.
    loo_posteriors: Vec<DMatrix<f64>>,
    labels: Vec<usize>,
    class_count: usize,
}

impl MarginMatrix {
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Oracle vector c_t: row t of theta.
    pub fn oracle_row(&self, t: usize) -> Vec<f64> {
        self.theta.row(t).iter().cloned().collect()
    }

    pub fn loo_posteriors(&self, t: usize) -> &DMatrix<f64> {
        &self.loo_posteriors[t]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn patch_count(&self) -> usize {
        self.theta.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.theta.ncols()
    }

    pub fn from_parts(
        theta: DMatrix<f64>,
        loo_posteriors: Vec<DMatrix<f64>>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Self {
        Self {
            theta,
            loo_posteriors,
            labels,
            class_count,
        }
    }
}

/// Build the margin matrix for a training set and its galleries.
///
/// Every class needs at least two samples so a leave-one-out basis is never
/// empty. The per-sample operators are recomputed directly; at desk scale
/// the `T * N` small factorizations dominate but stay cheap.
pub fn loo_margin_matrix(train: &[FaceImage], set: &GallerySet) -> Result<MarginMatrix> {
    if set.samples_per_class < 2 {
        return Err(Error::Protocol(
            "leave-one-out needs at least 2 samples per class".into(),
        ));
    }
    let n = train.len();
    let k = set.class_count;
    let t_count = set.patch_count();
    let labels: Vec<usize> = train.iter().map(|f| f.label).collect();
    let members: Vec<Vec<usize>> = (1..=k).map(|c| class_members(train, c)).collect();

    let per_patch: Vec<Result<(Vec<f64>, DMatrix<f64>)>> = par::map_indexed(t_count, |t| {
        let g = &set.galleries[t];
        let cols: Vec<DVector<f64>> = train
            .iter()
            .map(|img| crop_vectorize(img, &g.spec, &g.projection).map(|(v, _)| v))
            .collect::<Result<_>>()?;

        let mut theta_row = vec![0.0; n];
        let mut posts = DMatrix::zeros(k, n);
        for i in 0..n {
            let li = labels[i] - 1;
            let mut residuals = vec![0.0; k];
            for c in 0..k {
                if c == li {
                    let kept: Vec<DVector<f64>> = members[c]
                        .iter()
                        .filter(|&&idx| idx != i)
                        .map(|&idx| cols[idx].clone())
                        .collect();
                    let op = hat_operator(&DMatrix::from_columns(&kept), None)?;
                    residuals[c] = op.residual(&cols[i])?;
                } else {
                    residuals[c] = g.per_class[c].residual(&cols[i])?;
                }
            }
            let b = bpr_posterior(&residuals);
            for c in 0..k {
                posts[(c, i)] = b[c];
            }
            theta_row[i] = b[li] - 1.0 / k as f64;
        }
        Ok((theta_row, posts))
    });

    let mut theta = DMatrix::zeros(t_count, n);
    let mut loo_posteriors = Vec::with_capacity(t_count);
    for (t, item) in per_patch.into_iter().enumerate() {
        let (row, posts) = item?;
        for i in 0..n {
            theta[(t, i)] = row[i];
        }
        loo_posteriors.push(posts);
    }

    Ok(MarginMatrix {
        theta,
        loo_posteriors,
        labels,
        class_count: k,
    })
}

/// Leave-one-out training error of a weight vector: each sample is scored by
/// its own leave-one-out posteriors, predicted by argmax (lowest class index
/// on ties), and compared against its label.
pub fn training_error(mm: &MarginMatrix, alpha: &[f64]) -> f64 {
    let n = mm.sample_count();
    let k = mm.class_count;
    let mut wrong = 0usize;
    for i in 0..n {
        let mut xi = vec![0.0; k];
        for (t, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let posts = &mm.loo_posteriors[t];
            for (c, x) in xi.iter_mut().enumerate() {
                *x += a * posts[(c, i)];
            }
        }
        if argmax(&xi) + 1 != mm.labels[i] {
            wrong += 1;
        }
    }
    wrong as f64 / n as f64
}

/// Key identifying a cached margin matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCacheKey {
    pub dataset_digest: String,
    pub seed: u64,
    pub d: usize,
    pub patch_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ThetaCacheDoc {
    version: u32,
    key: ThetaCacheKey,
    class_count: usize,
    labels: Vec<usize>,
    theta: DMatrix<f64>,
    loo_posteriors: Vec<DMatrix<f64>>,
}

const THETA_CACHE_VERSION: u32 = 1;

impl MarginMatrix {
    /// Persist the matrix (and posteriors) keyed by dataset digest, seed,
    /// feature dimension, and patch count.
    pub fn save_cache(&self, path: &Path, key: &ThetaCacheKey) -> Result<()> {
        let doc = ThetaCacheDoc {
            version: THETA_CACHE_VERSION,
            key: key.clone(),
            class_count: self.class_count,
            labels: self.labels.clone(),
            theta: self.theta.clone(),
            loo_posteriors: self.loo_posteriors.clone(),
        };
        fs::write(path, serde_json::to_vec(&doc)?)?;
        Ok(())
    }

    /// Load a cached matrix, rejecting stale keys or versions.
    pub fn load_cache(path: &Path, key: &ThetaCacheKey) -> Result<MarginMatrix> {
        let doc: ThetaCacheDoc = serde_json::from_slice(&fs::read(path)?)?;
        if doc.version != THETA_CACHE_VERSION {
            return Err(Error::Format(format!(
                "theta cache version {} (expected {THETA_CACHE_VERSION})",
                doc.version
            )));
        }
        if &doc.key != key {
            return Err(Error::Format(
                "theta cache key does not match the requested dataset/seed/d/T".into(),
            ));
        }
        Ok(MarginMatrix {
            theta: doc.theta,
            loo_posteriors: doc.loo_posteriors,
            labels: doc.labels,
            class_count: doc.class_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{build_galleries, sample_patches, PatchSpec};
    use crate::test_util::gram_schmidt_residual;
    use approx::assert_relative_eq;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_train(seed: u64, k: usize, m: usize, side: usize) -> Vec<FaceImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        for label in 1..=k {
            for i in 0..m {
                let pixels = (0..side * side)
                    .map(|_| (rng.next_u32() as f64) / (u32::MAX as f64))
                    .collect();
                train.push(FaceImage::new(side, side, pixels, label, i).unwrap());
            }
        }
        train
    }

    #[test]
    fn twin_sample_gets_maximal_margin() {
        let mut train = random_train(1, 2, 3, 10);
        // Duplicate sample 0 inside class 1 (replace sample 1 with a copy).
        train[1] = FaceImage {
            sample_index: 1,
            ..train[0].clone()
        };
        let specs = sample_patches(10, 10, 2, 25, &[5], 4).unwrap();
        let set = build_galleries(&train, &specs, 12).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();
        for t in 0..2 {
            // With its twin still in the basis the left-out sample is
            // represented exactly; the margin sits at its maximum.
            assert!(mm.theta()[(t, 0)] > 0.5 - 1e-9, "theta {}", mm.theta()[(t, 0)]);
        }
    }

    #[test]
    fn orthogonal_sample_has_zero_margin() {
        // Classes live on disjoint pixels; one class-1 sample sits on pixels
        // nobody else touches, so after removal every residual is 1.
        let side = 4;
        let pix = |idx: usize, v: f64| {
            let mut p = vec![0.0; side * side];
            p[idx] = v;
            p
        };
        let train = vec![
            FaceImage::new(side, side, pix(0, 1.0), 1, 0).unwrap(),
            FaceImage::new(side, side, pix(1, 1.0), 1, 1).unwrap(),
            FaceImage::new(side, side, pix(4, 1.0), 1, 2).unwrap(),
            FaceImage::new(side, side, pix(2, 1.0), 2, 0).unwrap(),
            FaceImage::new(side, side, pix(3, 1.0), 2, 1).unwrap(),
            FaceImage::new(side, side, pix(2, 0.5), 2, 2).unwrap(),
        ];
        let spec = PatchSpec {
            id: 0,
            x0: 0,
            y0: 0,
            w: 4,
            h: 4,
            projection_seed: 0,
        };
        let set = build_galleries(&train, &[spec], 16).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();
        assert_relative_eq!(mm.theta()[(0, 2)], 0.0, epsilon = 1e-12);
        let posts = mm.loo_posteriors(0);
        assert_relative_eq!(posts[(0, 2)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(posts[(1, 2)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn matches_from_scratch_oracle() {
        let train = random_train(7, 2, 3, 10);
        let specs = sample_patches(10, 10, 2, 25, &[5], 19).unwrap();
        let set = build_galleries(&train, &specs, 12).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();

        // Oracle: rebuild every gallery from scratch per (t, i) and push the
        // residuals through a plain softmax, no cached operators anywhere.
        let k = 2;
        for (t, g) in set.galleries.iter().enumerate() {
            let cols: Vec<_> = train
                .iter()
                .map(|img| crop_vectorize(img, &g.spec, &g.projection).unwrap().0)
                .collect();
            for i in 0..train.len() {
                let li = train[i].label - 1;
                let mut rs = vec![0.0; k];
                for c in 0..k {
                    let basis: Vec<_> = train
                        .iter()
                        .enumerate()
                        .filter(|(j, f)| f.label == c + 1 && *j != i)
                        .map(|(j, _)| cols[j].clone())
                        .collect();
                    rs[c] =
                        gram_schmidt_residual(&DMatrix::from_columns(&basis), &cols[i]);
                }
                let min_sq = rs.iter().map(|r| r * r).fold(f64::INFINITY, f64::min);
                let delta = (0.1 * min_sq).max(1e-12);
                let num: Vec<f64> = rs.iter().map(|r| (-(r * r) / delta).exp()).collect();
                let z: f64 = num.iter().sum();
                let expect = num[li] / z - 0.5;
                assert_relative_eq!(mm.theta()[(t, i)], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn theta_entries_respect_bounds() {
        let train = random_train(11, 3, 3, 10);
        let specs = sample_patches(10, 10, 3, 25, &[5], 23).unwrap();
        let set = build_galleries(&train, &specs, 10).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();
        let k = 3.0;
        for v in mm.theta().iter() {
            assert!(*v >= -1.0 / k - 1e-12 && *v <= 1.0 - 1.0 / k + 1e-12);
        }
    }

    #[test]
    fn single_sample_class_is_a_protocol_error() {
        let train = random_train(3, 2, 1, 10);
        let specs = sample_patches(10, 10, 1, 25, &[5], 2).unwrap();
        let set = build_galleries(&train, &specs, 5).unwrap();
        assert!(matches!(
            loo_margin_matrix(&train, &set),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn training_error_perfect_and_degenerate_cases() {
        let train = random_train(5, 2, 3, 10);
        let specs = sample_patches(10, 10, 2, 25, &[5], 6).unwrap();
        let set = build_galleries(&train, &specs, 12).unwrap();
        let n = train.len();

        // Hand-built one-hot posteriors at the true class: zero error.
        let mut posts = Vec::new();
        let labels: Vec<usize> = train.iter().map(|f| f.label).collect();
        for _ in 0..2 {
            let mut p = DMatrix::zeros(2, n);
            for (i, &l) in labels.iter().enumerate() {
                p[(l - 1, i)] = 1.0;
            }
            posts.push(p);
        }
        let perfect = MarginMatrix::from_parts(DMatrix::zeros(2, n), posts, labels, 2);
        assert_eq!(training_error(&perfect, &[0.3, 0.7]), 0.0);

        // alpha = 0: every score ties at zero, the tie rule predicts class 1.
        let mm = loo_margin_matrix(&train, &set).unwrap();
        let class1 = train.iter().filter(|f| f.label == 1).count();
        let expected = 1.0 - class1 as f64 / n as f64;
        assert_relative_eq!(training_error(&mm, &[0.0, 0.0]), expected, epsilon = 1e-12);
    }

    #[test]
    fn training_error_matches_direct_recomputation() {
        let train = random_train(9, 3, 3, 10);
        let specs = sample_patches(10, 10, 3, 25, &[5], 8).unwrap();
        let set = build_galleries(&train, &specs, 10).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();
        let alpha = [0.4, 0.1, 0.5];

        let mut wrong = 0;
        for i in 0..train.len() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..3 {
                let xi: f64 = (0..3)
                    .map(|t| alpha[t] * mm.loo_posteriors(t)[(c, i)])
                    .sum();
                if xi > best.1 {
                    best = (c, xi);
                }
            }
            if best.0 + 1 != train[i].label {
                wrong += 1;
            }
        }
        assert_relative_eq!(
            training_error(&mm, &alpha),
            wrong as f64 / train.len() as f64,
            epsilon = 1e-15
        );
    }

    #[test]
    fn training_error_is_scale_invariant() {
        let train = random_train(13, 2, 4, 10);
        let specs = sample_patches(10, 10, 3, 25, &[5], 14).unwrap();
        let set = build_galleries(&train, &specs, 12).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let scaled: Vec<f64> = alpha.iter().map(|a| a * 17.5).collect();
        assert_eq!(training_error(&mm, &alpha), training_error(&mm, &scaled));
    }

    #[test]
    fn removing_one_sample_leaves_other_margins_alone_on_overspanned_data() {
        // Low-rank classes: every image is a nonnegative combination of two
        // per-class basis images, six samples per class.
        let side = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut train = Vec::new();
        for label in 1..=2u8 {
            let basis: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    (0..side * side)
                        .map(|_| rng.random_range(0.0..1.0))
                        .collect()
                })
                .collect();
            for i in 0..6 {
                let (a, b) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
                let pixels = (0..side * side)
                    .map(|p| a * basis[0][p] + b * basis[1][p])
                    .collect();
                train.push(FaceImage::new(side, side, pixels, label as usize, i).unwrap());
            }
        }
        let specs = sample_patches(side, side, 2, 25, &[5], 33).unwrap();
        let set = build_galleries(&train, &specs, 10).unwrap();

        let full = loo_margin_matrix(&train, &set).unwrap();

        // Replace the last class-2 sample with a fresh draw from the same
        // two-dimensional span. Spans are over-determined (6 samples, rank
        // 2), so every other sample's leave-one-out basis spans the same
        // subspace and its margin must not move.
        let mut swapped = train.clone();
        let dst = swapped
            .iter()
            .position(|f| f.label == 2 && f.sample_index == 5)
            .unwrap();
        let donor = swapped
            .iter()
            .position(|f| f.label == 2 && f.sample_index == 3)
            .unwrap();
        let blend: Vec<f64> = swapped[donor]
            .pixels
            .iter()
            .zip(&swapped[dst].pixels)
            .map(|(a, b)| 0.6 * a + 0.7 * b)
            .collect();
        swapped[dst] = FaceImage::new(side, side, blend, 2, 5).unwrap();

        let swapped_mm =
            loo_margin_matrix(&swapped, &build_galleries(&swapped, &specs, 10).unwrap())
                .unwrap();
        for t in 0..set.patch_count() {
            for i in 0..train.len() {
                if i == dst {
                    continue;
                }
                let drift = (full.theta()[(t, i)] - swapped_mm.theta()[(t, i)]).abs();
                assert!(drift <= 1e-8, "margin drift {drift:+e} at t={t}, i={i}");
            }
        }
    }

    #[test]
    fn cache_round_trip_and_key_check() {
        let train = random_train(17, 2, 3, 10);
        let specs = sample_patches(10, 10, 2, 25, &[5], 3).unwrap();
        let set = build_galleries(&train, &specs, 8).unwrap();
        let mm = loo_margin_matrix(&train, &set).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.json");
        let key = ThetaCacheKey {
            dataset_digest: "abc".into(),
            seed: 3,
            d: 8,
            patch_count: 2,
        };
        mm.save_cache(&path, &key).unwrap();
        let loaded = MarginMatrix::load_cache(&path, &key).unwrap();
        assert_eq!(mm, loaded);

        let stale = ThetaCacheKey {
            seed: 4,
            ..key.clone()
        };
        assert!(MarginMatrix::load_cache(&path, &stale).is_err());
    }
}
