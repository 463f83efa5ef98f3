//! Random patch sampling and per-patch gallery construction.
//!
//! A patch is a rectangle of fixed area on the image grid plus the seed of
//! its own random projection. For every patch the training set yields one
//! hat operator per class (columns are the class's projected, normalized
//! crops) and one pooled operator over all classes, used later to judge how
//! face-like a test patch is.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{hat_operator, mix_seed, random_projection, unit_normalize, HatOperator};
use crate::par;

/// Aligned grayscale image with its class label.
///
/// Pixels are row-major. Loaded images are scaled to `[0, 1]`; synthetic
/// images are linear-subspace samples and may leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Class id in `1..=K`.
    pub label: usize,
    pub sample_index: usize,
}

impl FaceImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        label: usize,
        sample_index: usize,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidDimension {
                context: "FaceImage pixels",
                expected: width * height,
                got: pixels.len(),
            });
        }
        if label == 0 {
            return Err(Error::InvalidArgument("class labels start at 1".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            label,
            sample_index,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Rectangular sub-region plus the seed of its projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Patch index t.
    pub id: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub projection_seed: u64,
}

impl PatchSpec {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

/// Per-patch training state: one hat operator per class, the pooled
/// all-class operator, and the projection that produced the columns.
#[derive(Debug, Clone)]
pub struct PatchGallery {
    pub spec: PatchSpec,
    pub per_class: Vec<HatOperator>,
    pub pooled: HatOperator,
    pub projection: DMatrix<f64>,
}

impl PatchGallery {
    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }
}

/// Galleries for a full patch set, with the training grid they came from.
#[derive(Debug, Clone)]
pub struct GallerySet {
    pub galleries: Vec<PatchGallery>,
    pub img_width: usize,
    pub img_height: usize,
    pub class_count: usize,
    pub samples_per_class: usize,
}

impl GallerySet {
    pub fn patch_count(&self) -> usize {
        self.galleries.len()
    }
}

/// Sample `count` patch rectangles of the given area. Widths are drawn
/// uniformly from the entries of `widths` that divide the area and fit the
/// grid; top-left corners are uniform over valid positions. Per-patch
/// projection seeds are derived from `seed` and the patch index.
pub fn sample_patches(
    img_w: usize,
    img_h: usize,
    count: usize,
    area: usize,
    widths: &[usize],
    seed: u64,
) -> Result<Vec<PatchSpec>> {
    let valid: Vec<(usize, usize)> = widths
        .iter()
        .filter(|&&w| w > 0 && area % w == 0)
        .map(|&w| (w, area / w))
        .filter(|&(w, h)| w <= img_w && h <= img_h)
        .collect();
    if valid.is_empty() {
        return Err(Error::Config(format!(
            "no width in {widths:?} yields an {area}-pixel patch inside {img_w}x{img_h}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(count);
    for t in 0..count {
        let (w, h) = valid[rng.random_range(0..valid.len())];
        let x0 = rng.random_range(0..=img_w - w);
        let y0 = rng.random_range(0..=img_h - h);
        specs.push(PatchSpec {
            id: t,
            x0,
            y0,
            w,
            h,
            projection_seed: mix_seed(seed, t as u64),
        });
    }
    Ok(specs)
}

/// Crop the patch window row-major, project it, and unit-normalize.
/// Returns the feature vector and the degenerate (all-black window) flag.
pub fn crop_vectorize(
    image: &FaceImage,
    spec: &PatchSpec,
    projection: &DMatrix<f64>,
) -> Result<(DVector<f64>, bool)> {
    if !spec.fits(image.width, image.height) {
        return Err(Error::InvalidInput(format!(
            "patch {} ({}x{} at {},{}) exceeds image {}x{}",
            spec.id, spec.w, spec.h, spec.x0, spec.y0, image.width, image.height
        )));
    }
    if projection.ncols() != spec.area() {
        return Err(Error::InvalidDimension {
            context: "crop_vectorize projection",
            expected: spec.area(),
            got: projection.ncols(),
        });
    }
    let mut raw = DVector::zeros(spec.area());
    let mut i = 0;
    for dy in 0..spec.h {
        for dx in 0..spec.w {
            raw[i] = image.pixel(spec.x0 + dx, spec.y0 + dy);
            i += 1;
        }
    }
    let projected = projection * raw;
    Ok(unit_normalize(projected))
}

/// Projection for a patch: identity when `d` equals the patch area (the
/// original pixels are used directly), otherwise a seeded Gaussian map.
pub fn patch_projection(spec: &PatchSpec, d: usize) -> Result<DMatrix<f64>> {
    if d == spec.area() {
        Ok(DMatrix::identity(d, d))
    } else {
        random_projection(spec.area(), d, spec.projection_seed)
    }
}

/// Group training images by class, requiring labels `1..=K` with the same
/// count per class. Returns indices per class, in training-list order.
fn class_index(train: &[FaceImage]) -> Result<Vec<Vec<usize>>> {
    if train.is_empty() {
        return Err(Error::Protocol("empty training set".into()));
    }
    let k = train.iter().map(|f| f.label).max().unwrap();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, f) in train.iter().enumerate() {
        by_class[f.label - 1].push(i);
    }
    let m = by_class[0].len();
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Protocol(format!("class {} has no samples", c + 1)));
        }
        if members.len() != m {
            return Err(Error::Protocol(format!(
                "classes must share the sample count: class 1 has {m}, class {} has {}",
                c + 1,
                members.len()
            )));
        }
    }
    Ok(by_class)
}

/// Build per-patch galleries for a training set: for each spec, the class
/// operators over that class's M projected crops and the pooled operator
/// over all N crops. Pure in its inputs; repeated builds are identical.
pub fn build_galleries(train: &[FaceImage], specs: &[PatchSpec], d: usize) -> Result<GallerySet> {
    let by_class = class_index(train)?;
    let k = by_class.len();
    let m = by_class[0].len();
    let (img_w, img_h) = (train[0].width, train[0].height);
    for f in train {
        if f.width != img_w || f.height != img_h {
            return Err(Error::Format(
                "training images must share one grid size".into(),
            ));
        }
    }
    for spec in specs {
        if !spec.fits(img_w, img_h) {
            return Err(Error::InvalidInput(format!(
                "patch {} does not fit the {img_w}x{img_h} training grid",
                spec.id
            )));
        }
        if d > spec.area() {
            return Err(Error::InvalidDimension {
                context: "build_galleries feature dim",
                expected: spec.area(),
                got: d,
            });
        }
    }

    let galleries: Vec<Result<PatchGallery>> = par::map_slice(specs, |spec| {
        let projection = patch_projection(spec, d)?;
        let mut per_class = Vec::with_capacity(k);
        let mut pooled_cols: Vec<DVector<f64>> = Vec::with_capacity(k * m);
        for members in &by_class {
            let mut cols = Vec::with_capacity(m);
            for &idx in members {
                let (v, _) = crop_vectorize(&train[idx], spec, &projection)?;
                cols.push(v);
            }
            pooled_cols.extend(cols.iter().cloned());
            per_class.push(hat_operator(&DMatrix::from_columns(&cols), None)?);
        }
        let pooled = hat_operator(&DMatrix::from_columns(&pooled_cols), None)?;
        Ok(PatchGallery {
            spec: *spec,
            per_class,
            pooled,
            projection,
        })
    });

    let galleries = galleries.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GallerySet {
        galleries,
        img_width: img_w,
        img_height: img_h,
        class_count: k,
        samples_per_class: m,
    })
}

/// Indices of a class's members in training-list order (the column order of
/// that class's gallery matrices).
pub fn class_members(train: &[FaceImage], class: usize) -> Vec<usize> {
    train
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == class)
        .map(|(i, _)| i)
        .collect()
}
