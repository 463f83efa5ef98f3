//! Probe classification with a trained ensemble: plain aggregation of patch
//! posteriors, and the robust variant that fades the learned weights and
//! multiplies in each patch's generic-face confidence so occluded regions
//! lose their vote.

use crate::bpr::{argmax, bpr_posterior, gfc, patch_residuals};
use crate::error::{Error, Result};
use crate::learn::EnsembleModel;
use crate::patch::{crop_vectorize, FaceImage, GallerySet};

/// Evidence contributed by one selected patch.
#[derive(Debug, Clone)]
pub struct PatchEvidence {
    pub t: usize,
    pub posterior: Vec<f64>,
    /// Generic-face confidence; 1 for plain prediction.
    pub gfc: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Class id in `1..=K`; argmax of `xi`, lowest index on ties.
    pub label: usize,
    pub xi: Vec<f64>,
    pub per_patch: Vec<PatchEvidence>,
}

impl Prediction {
    pub fn mean_gfc(&self) -> f64 {
        if self.per_patch.is_empty() {
            return 1.0;
        }
        self.per_patch.iter().map(|p| p.gfc).sum::<f64>() / self.per_patch.len() as f64
    }

    /// The `count` largest confidences with their class ids, descending.
    pub fn top_classes(&self, count: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .xi
            .iter()
            .enumerate()
            .map(|(c, &v)| (c + 1, v))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(count);
        ranked
    }
}

fn check_probe(model: &EnsembleModel, set: &GallerySet, probe: &FaceImage) -> Result<Vec<usize>> {
    if set.patch_count() != model.specs.len() {
        return Err(Error::InvalidInput(format!(
            "model has {} patches but the gallery set has {}",
            model.specs.len(),
            set.patch_count()
        )));
    }
    for spec in &model.specs {
        if !spec.fits(set.img_width, set.img_height) {
            return Err(Error::InvalidInput(
                "model patches do not fit the gallery training grid".into(),
            ));
        }
    }
    if probe.width != set.img_width || probe.height != set.img_height {
        return Err(Error::InvalidInput(format!(
            "probe is {}x{} but the model was trained on {}x{}",
            probe.width, probe.height, set.img_width, set.img_height
        )));
    }
    let selected = model.selected();
    if selected.is_empty() {
        return Err(Error::InvalidInput("model selected no patches".into()));
    }
    Ok(selected)
}

/// Plain aggregation: `xi = sum over selected t of alpha_t * b_t(y)`.
pub fn predict(model: &EnsembleModel, set: &GallerySet, probe: &FaceImage) -> Result<Prediction> {
    let selected = check_probe(model, set, probe)?;
    let k = set.class_count;
    let mut xi = vec![0.0; k];
    let mut per_patch = Vec::with_capacity(selected.len());
    for &t in &selected {
        let g = &set.galleries[t];
        let (y_t, _) = crop_vectorize(probe, &g.spec, &g.projection)?;
        let residuals = patch_residuals(g, &y_t)?;
        let posterior = bpr_posterior(&residuals);
        for (c, x) in xi.iter_mut().enumerate() {
            *x += model.alpha[t] * posterior[c];
        }
        per_patch.push(PatchEvidence {
            t,
            posterior,
            gfc: 1.0,
        });
    }
    Ok(Prediction {
        label: argmax(&xi) + 1,
        xi,
        per_patch,
    })
}

/// Robust aggregation: `xi = sum over selected t of alpha_t^q * GFC_t * b_t`.
/// Confidences come from the pooled residuals of the selected patches on this
/// probe. `alpha^q` is taken as 0 when `alpha` is 0, so unselected patches
/// never enter regardless of q.
pub fn predict_robust(
    model: &EnsembleModel,
    set: &GallerySet,
    probe: &FaceImage,
    q: f64,
) -> Result<Prediction> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "fading coefficient q must lie in [0, 1], got {q}"
        )));
    }
    let selected = check_probe(model, set, probe)?;
    let k = set.class_count;

    let mut posteriors = Vec::with_capacity(selected.len());
    let mut generic = Vec::with_capacity(selected.len());
    for &t in &selected {
        let g = &set.galleries[t];
        let (y_t, _) = crop_vectorize(probe, &g.spec, &g.projection)?;
        let residuals = patch_residuals(g, &y_t)?;
        posteriors.push(bpr_posterior(&residuals));
        generic.push(g.pooled.residual(&y_t)?);
    }
    let confidences = gfc(&generic)?;

    let mut xi = vec![0.0; k];
    let mut per_patch = Vec::with_capacity(selected.len());
    for (idx, &t) in selected.iter().enumerate() {
        let faded = if model.alpha[t] > 0.0 {
            model.alpha[t].powf(q)
        } else {
            0.0
        };
        let weight = faded * confidences[idx];
        for (c, x) in xi.iter_mut().enumerate() {
            *x += weight * posteriors[idx][c];
        }
        per_patch.push(PatchEvidence {
            t,
            posterior: posteriors[idx].clone(),
            gfc: confidences[idx],
        });
    }
    Ok(Prediction {
        label: argmax(&xi) + 1,
        xi,
        per_patch,
    })
}
