//! Reference classifiers: nearest neighbor, whole-image least-squares
//! residual classification, and the block-wise residual-competition variant.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{hat_operator, unit_normalize, HatOperator};
use crate::patch::{class_members, FaceImage};

/// Nearest neighbor by Euclidean distance; ties go to the lower sample index.
pub fn nn_classify(train: &[DVector<f64>], labels: &[usize], probe: &DVector<f64>) -> Result<usize> {
    if train.is_empty() || train.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "nn_classify needs matching, nonempty vectors and labels".into(),
        ));
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, x) in train.iter().enumerate() {
        if x.len() != probe.len() {
            return Err(Error::InvalidDimension {
                context: "nn_classify",
                expected: probe.len(),
                got: x.len(),
            });
        }
        let dist = (x - probe).norm();
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    Ok(labels[best])
}

/// Smallest whole-class reconstruction residual; ties go to the lower class.
pub fn lrc_classify(class_ops: &[HatOperator], probe: &DVector<f64>) -> Result<usize> {
    if class_ops.is_empty() {
        return Err(Error::InvalidArgument("lrc_classify needs classes".into()));
    }
    let mut best = 0usize;
    let mut best_r = f64::INFINITY;
    for (c, op) in class_ops.iter().enumerate() {
        let r = op.residual(probe)?;
        if r < best_r {
            best_r = r;
            best = c;
        }
    }
    Ok(best + 1)
}

/// Block layout for the modular baseline: a `rows x cols` partition, each
/// block downsampled to `down_h x down_w` by area averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPartition {
    pub rows: usize,
    pub cols: usize,
    pub down_h: usize,
    pub down_w: usize,
}

impl Default for BlockPartition {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 2,
            down_h: 12,
            down_w: 9,
        }
    }
}

/// How block verdicts are fused. The competition rule used by the original
/// method is defined in external work; the default stand-in takes the block
/// whose best class residual is smallest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DefFusion {
    /// Label of the block with the globally smallest class residual.
    #[default]
    MinResidual,
    /// Majority vote over per-block labels; ties fall back to MinResidual
    /// among the tied labels.
    MajorityVote,
}

struct BlockModel {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ops: Vec<HatOperator>,
}

/// Block-wise residual classifier built once over a training set.
pub struct DefClassifier {
    partition: BlockPartition,
    fusion: DefFusion,
    blocks: Vec<BlockModel>,
    class_count: usize,
    img_width: usize,
    img_height: usize,
}

/// Area-average resize of a `sw x sh` patch to `dw x dh` (fractional source
/// windows handled by exact overlap weighting).
fn area_average(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = vec![0.0; dw * dh];
    for ty in 0..dh {
        let y0 = ty as f64 * sy;
        let y1 = y0 + sy;
        for tx in 0..dw {
            let x0 = tx as f64 * sx;
            let x1 = x0 + sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let mut yy = y0.floor() as usize;
            while (yy as f64) < y1 && yy < sh {
                let oy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
                let mut xx = x0.floor() as usize;
                while (xx as f64) < x1 && xx < sw {
                    let ox = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                    acc += src[yy * sw + xx] * ox * oy;
                    area += ox * oy;
                    xx += 1;
                }
                yy += 1;
            }
            out[ty * dw + tx] = acc / area;
        }
    }
    out
}

fn block_feature(img: &FaceImage, b: (usize, usize, usize, usize), p: &BlockPartition) -> DVector<f64> {
    let (x0, y0, w, h) = b;
    let mut src = Vec::with_capacity(w * h);
    for dy in 0..h {
        for dx in 0..w {
            src.push(img.pixel(x0 + dx, y0 + dy));
        }
    }
    let down = area_average(&src, w, h, p.down_w, p.down_h);
    let (v, _) = unit_normalize(DVector::from_vec(down));
    v
}

impl DefClassifier {
    pub fn build(
        partition: BlockPartition,
        fusion: DefFusion,
        train: &[FaceImage],
    ) -> Result<Self> {
        if partition.rows == 0 || partition.cols == 0 || partition.down_h == 0 || partition.down_w == 0
        {
            return Err(Error::InvalidArgument("empty block partition".into()));
        }
        if train.is_empty() {
            return Err(Error::Protocol("empty training set".into()));
        }
        let (img_w, img_h) = (train[0].width, train[0].height);
        let bw = img_w / partition.cols;
        let bh = img_h / partition.rows;
        if bw == 0 || bh == 0 {
            return Err(Error::InvalidArgument(
                "partition finer than the image grid".into(),
            ));
        }
        let class_count = train.iter().map(|f| f.label).max().unwrap();

        // Remainder pixels on the right/bottom edge are truncated.
        let mut blocks = Vec::new();
        for r in 0..partition.rows {
            for c in 0..partition.cols {
                let region = (c * bw, r * bh, bw, bh);
                let mut ops = Vec::with_capacity(class_count);
                for class in 1..=class_count {
                    let cols: Vec<DVector<f64>> = class_members(train, class)
                        .into_iter()
                        .map(|i| block_feature(&train[i], region, &partition))
                        .collect();
                    if cols.is_empty() {
                        return Err(Error::Protocol(format!("class {class} has no samples")));
                    }
                    ops.push(hat_operator(&DMatrix::from_columns(&cols), None)?);
                }
                blocks.push(BlockModel {
                    x0: region.0,
                    y0: region.1,
                    w: region.2,
                    h: region.3,
                    ops,
                });
            }
        }
        Ok(Self {
            partition,
            fusion,
            blocks,
            class_count,
            img_width: img_w,
            img_height: img_h,
        })
    }

    pub fn classify(&self, probe: &FaceImage) -> Result<usize> {
        if probe.width != self.img_width || probe.height != self.img_height {
            return Err(Error::InvalidInput(
                "probe size differs from the training grid".into(),
            ));
        }
        // Per block: (best residual, best class).
        let mut verdicts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let y = block_feature(probe, (b.x0, b.y0, b.w, b.h), &self.partition);
            let mut best = (f64::INFINITY, 0usize);
            for (c, op) in b.ops.iter().enumerate() {
                let r = op.residual(&y)?;
                if r < best.0 {
                    best = (r, c + 1);
                }
            }
            verdicts.push(best);
        }

        match self.fusion {
            DefFusion::MinResidual => Ok(verdicts
                .iter()
                .fold((f64::INFINITY, 1usize), |acc, &(r, c)| {
                    if r < acc.0 {
                        (r, c)
                    } else {
                        acc
                    }
                })
                .1),
            DefFusion::MajorityVote => {
                let mut votes = vec![0usize; self.class_count + 1];
                for &(_, c) in &verdicts {
                    votes[c] += 1;
                }
                let top = votes.iter().max().copied().unwrap_or(0);
                let tied: Vec<usize> = (1..=self.class_count)
                    .filter(|&c| votes[c] == top)
                    .collect();
                Ok(verdicts
                    .iter()
                    .filter(|(_, c)| tied.contains(c))
                    .fold((f64::INFINITY, tied[0]), |acc, &(r, c)| {
                        if r < acc.0 {
                            (r, c)
                        } else {
                            acc
                        }
                    })
                    .1)
            }
        }
    }
}

/// One-shot block-fusion classification with the default competition rule.
pub fn def_classify(
    partition: BlockPartition,
    train: &[FaceImage],
    probe: &FaceImage,
) -> Result<usize> {
    DefClassifier::build(partition, DefFusion::default(), train)?.classify(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{gram_schmidt_residual, random_matrix, random_unit_vector};
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nn_recovers_exact_match_and_breaks_ties_low() {
        let train = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
        ];
        let labels = vec![3, 1, 2];
        assert_eq!(nn_classify(&train, &labels, &train[1]).unwrap(), 1);

        // Probe equidistant from samples 0 and 1: index 0 wins.
        let probe = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(nn_classify(&train, &labels, &probe).unwrap(), 3);
    }

    #[test]
    fn nn_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train: Vec<DVector<f64>> = (0..20).map(|_| random_unit_vector(&mut rng, 6)).collect();
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(1..4)).collect();
        for _ in 0..10 {
            let probe = random_unit_vector(&mut rng, 6);
            let mut best = (f64::INFINITY, 0usize);
            for (i, x) in train.iter().enumerate() {
                let d = (x - &probe).norm();
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(nn_classify(&train, &labels, &probe).unwrap(), labels[best.1]);
        }
    }

    #[test]
    fn lrc_zero_residual_wins_and_ties_fall_to_class_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = random_matrix(&mut rng, 10, 3);
        let x2 = random_matrix(&mut rng, 10, 3);
        let ops = vec![
            hat_operator(&x1, None).unwrap(),
            hat_operator(&x2, None).unwrap(),
        ];
        let probe = x2.column(1).into_owned();
        assert_eq!(lrc_classify(&ops, &probe).unwrap(), 2);

        // Orthogonal probe: both residuals are 1, class 1 by the tie rule.
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let ortho_ops = vec![
            hat_operator(&DMatrix::from_columns(&[e1]), None).unwrap(),
            hat_operator(&DMatrix::from_columns(&[e2]), None).unwrap(),
        ];
        let probe = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert_eq!(lrc_classify(&ortho_ops, &probe).unwrap(), 1);
    }

    #[test]
    fn lrc_matches_per_class_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bases: Vec<DMatrix<f64>> = (0..3).map(|_| random_matrix(&mut rng, 12, 4)).collect();
        let ops: Vec<HatOperator> = bases
            .iter()
            .map(|x| hat_operator(x, None).unwrap())
            .collect();
        for _ in 0..10 {
            let probe = random_unit_vector(&mut rng, 12);
            let mut best = (f64::INFINITY, 0usize);
            for (c, x) in bases.iter().enumerate() {
                let r = gram_schmidt_residual(x, &probe);
                if r < best.0 {
                    best = (r, c + 1);
                }
            }
            assert_eq!(lrc_classify(&ops, &probe).unwrap(), best.1);
        }
    }

    fn random_faces(rng: &mut ChaCha8Rng, k: usize, m: usize, w: usize, h: usize) -> Vec<FaceImage> {
        let mut out = Vec::new();
        for label in 1..=k {
            for i in 0..m {
                let pixels = (0..w * h)
                    .map(|_| (rng.next_u32() as f64) / (u32::MAX as f64))
                    .collect();
                out.push(FaceImage::new(w, h, pixels, label, i).unwrap());
            }
        }
        out
    }

    #[test]
    fn def_training_probe_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let train = random_faces(&mut rng, 2, 4, 36, 48);
        let probe = train[5].clone();
        let label = def_classify(BlockPartition::default(), &train, &probe).unwrap();
        assert_eq!(label, probe.label);
    }

    #[test]
    fn def_matches_rule_by_rule_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let partition = BlockPartition::default();
        let train = random_faces(&mut rng, 3, 4, 36, 48);
        let clf = DefClassifier::build(partition, DefFusion::MinResidual, &train).unwrap();

        for _ in 0..5 {
            let probe = &random_faces(&mut rng, 1, 1, 36, 48)[0];
            let got = clf.classify(probe).unwrap();

            // Oracle: recompute block features and residuals directly.
            let bw = 36 / partition.cols;
            let bh = 48 / partition.rows;
            let mut best = (f64::INFINITY, 1usize);
            for r in 0..partition.rows {
                for c in 0..partition.cols {
                    let region = (c * bw, r * bh, bw, bh);
                    let y = block_feature(probe, region, &partition);
                    for class in 1..=3usize {
                        let cols: Vec<DVector<f64>> = class_members(&train, class)
                            .into_iter()
                            .map(|i| block_feature(&train[i], region, &partition))
                            .collect();
                        let resid =
                            gram_schmidt_residual(&DMatrix::from_columns(&cols), &y);
                        if resid < best.0 {
                            best = (resid, class);
                        }
                    }
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn area_average_preserves_constants_and_means() {
        let src = vec![0.25; 30 * 20];
        let out = area_average(&src, 30, 20, 9, 12);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        // Exact 2x2 -> 1x1 averaging.
        let out = area_average(&[0.0, 1.0, 1.0, 0.0], 2, 2, 1, 1);
        assert!((out[0] - 0.5).abs() < 1e-12);
    }
}
