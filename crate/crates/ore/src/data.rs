//! Dataset ingestion, synthetic low-rank dataset generation, and occlusion
//! synthesis.
//!
//! Directory layout for real data: one subdirectory per class, holding 8-bit
//! grayscale `.pgm` or `.png` files of one size; classes are numbered 1..K in
//! lexicographic directory order, files ordered lexicographically inside.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patch::FaceImage;

/// Parameters of the synthetic generator. Every class gets `surfaces`
/// orthonormal bases of `phi` dimensions each (expression analogs); samples
/// are nonnegative combinations of the class dictionary plus pixel noise, so
/// with zero noise every sample lies exactly in its class subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub phi: usize,
    pub surfaces: usize,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0
            || self.samples_per_class == 0
            || self.phi == 0
            || self.surfaces == 0
            || self.width == 0
            || self.height == 0
        {
            return Err(Error::InvalidArgument(
                "all synthetic counts must be at least 1".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        let dict = self.phi * self.surfaces;
        if dict > self.width * self.height {
            return Err(Error::InvalidArgument(format!(
                "dictionary size {dict} exceeds the ambient dimension {}",
                self.width * self.height
            )));
        }
        Ok(())
    }
}

/// Load one grayscale image, scaled to `[0, 1]`, with a placeholder label.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.as_raw().iter().map(|&p| p as f64 / 255.0).collect();
    FaceImage::new(w, h, pixels, 1, 0)
}

/// Load a class-per-directory dataset. With `truncate` set, classes with
/// extra files are cut to the smallest class size (lexicographic order);
/// otherwise unequal counts are an error.
pub fn load_dataset(root: &Path, truncate: bool) -> Result<Vec<FaceImage>> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Format(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut per_class_files: Vec<Vec<std::path::PathBuf>> = Vec::new();
    for dir in &class_dirs {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()),
                    Some("pgm") | Some("png")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!("class {} is empty", dir.display())));
        }
        per_class_files.push(files);
    }

    let min_count = per_class_files.iter().map(|f| f.len()).min().unwrap();
    if !truncate && per_class_files.iter().any(|f| f.len() != min_count) {
        return Err(Error::Format(
            "classes have unequal image counts (pass truncate to cut to the minimum)".into(),
        ));
    }

    let mut images = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (class_idx, files) in per_class_files.iter().enumerate() {
        for (i, file) in files.iter().take(min_count).enumerate() {
            let mut img = load_image(file)?;
            match dims {
                None => dims = Some((img.width, img.height)),
                Some(expected) if expected != (img.width, img.height) => {
                    return Err(Error::Format(format!(
                        "{} is {}x{} but the dataset is {}x{}",
                        file.display(),
                        img.width,
                        img.height,
                        expected.0,
                        expected.1
                    )));
                }
                _ => {}
            }
            img.label = class_idx + 1;
            img.sample_index = i;
            images.push(img);
        }
    }
    Ok(images)
}

/// Write images as 8-bit PNGs in the directory layout `load_dataset` reads.
/// Pixels are clamped to `[0, 1]` before quantization.
pub fn save_dataset(dir: &Path, images: &[FaceImage]) -> Result<()> {
    for img in images {
        let class_dir = dir.join(format!("{:04}", img.label));
        fs::create_dir_all(&class_dir)?;
        let buf: Vec<u8> = img
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = class_dir.join(format!("img_{:05}.png", img.sample_index));
        image::save_buffer(
            &path,
            &buf,
            img.width as u32,
            img.height as u32,
            image::ColorType::L8,
        )?;
    }
    Ok(())
}

/// Content digest of a dataset (labels, indices, geometry, exact pixel bits).
pub fn dataset_digest(images: &[FaceImage]) -> String {
    let mut hasher = Sha256::new();
    for img in images {
        hasher.update((img.label as u64).to_le_bytes());
        hasher.update((img.sample_index as u64).to_le_bytes());
        hasher.update((img.width as u64).to_le_bytes());
        hasher.update((img.height as u64).to_le_bytes());
        for p in &img.pixels {
            hasher.update(p.to_bits().to_le_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate a train and test split from the synthetic model, `M` samples per
/// class each. Deterministic per seed.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<(Vec<FaceImage>, Vec<FaceImage>)> {
    spec.validate()?;
    let dim = spec.width * spec.height;
    let dict_size = spec.phi * spec.surfaces;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_idx = 0usize;
    let mut test_idx = 0usize;
    for class in 1..=spec.classes {
        // Orthonormal class dictionary.
        let mut dict: Vec<DVector<f64>> = Vec::with_capacity(dict_size);
        while dict.len() < dict_size {
            let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            for q in &dict {
                let c = q.dot(&v);
                v -= q * c;
            }
            let n = v.norm();
            if n > 1e-8 {
                dict.push(v / n);
            }
        }

        let draw = |rng: &mut ChaCha8Rng, index: usize| -> FaceImage {
            let mut img = DVector::zeros(dim);
            for basis in &dict {
                img += basis * rng.random_range(0.1..1.0);
            }
            if spec.noise_sigma > 0.0 {
                for v in img.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v += spec.noise_sigma * g;
                }
            }
            FaceImage {
                width: spec.width,
                height: spec.height,
                pixels: img.iter().cloned().collect(),
                label: class,
                sample_index: index,
            }
        };

        for _ in 0..spec.samples_per_class {
            let img = draw(&mut rng, train_idx);
            train_idx += 1;
            train.push(img);
        }
        for _ in 0..spec.samples_per_class {
            let img = draw(&mut rng, test_idx);
            test_idx += 1;
            test.push(img);
        }
    }
    Ok((train, test))
}

/// Cover the image with `max(round(0.4 * area / s^2), 3)` random `s x s`
/// blocks of clipped Gaussian noise (mean 0.5, sd 0.25, clipped to `[0,1]`).
/// Blocks are placed independently and may overlap.
pub fn occlude(image: &FaceImage, s: usize, seed: u64) -> Result<FaceImage> {
    if s == 0 || s > image.width.min(image.height) {
        return Err(Error::InvalidArgument(format!(
            "block size {s} does not fit a {}x{} image",
            image.width, image.height
        )));
    }
    let sigma_f = (image.width * image.height) as f64;
    let blocks = ((0.4 * sigma_f / (s * s) as f64).round() as usize).max(3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for _ in 0..blocks {
        let x0 = rng.random_range(0..=image.width - s);
        let y0 = rng.random_range(0..=image.height - s);
        for dy in 0..s {
            for dx in 0..s {
                let g: f64 = rng.sample(StandardNormal);
                out.pixels[(y0 + dy) * image.width + (x0 + dx)] =
                    (0.5 + 0.25 * g).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Number of occlusion blocks used for a given image area and block size.
pub fn occlusion_block_count(img_area: usize, s: usize) -> usize {
    ((0.4 * img_area as f64 / (s * s) as f64).round() as usize).max(3)
}
