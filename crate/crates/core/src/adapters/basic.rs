use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ScoreMap;
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, LabelMask};
use crate::sampling::foreground_pixels;

const NORM_EPSILON: f64 = 1e-12;

/// How the template region's pixel vectors collapse into a matching score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateReduction {
    /// Cosine against the mean of the unit-normalised region vectors.
    #[default]
    Mean,
    /// Best cosine against any single region vector.
    Max,
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPSILON || nb < NORM_EPSILON {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn unit(v: &[f32]) -> Vec<f64> {
    let w: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_EPSILON {
        vec![0.0; w.len()]
    } else {
        w.into_iter().map(|x| x / n).collect()
    }
}

/// Marks target pixels whose cosine similarity to the template region of
/// `label` is at least `threshold`. Returns the binary mask and the
/// one-channel similarity map.
pub fn basic_localize(
    template_feats: &FeatureMap,
    template_mask: &LabelMask,
    label: u8,
    target_feats: &FeatureMap,
    threshold: f64,
    reduction: TemplateReduction,
) -> Result<(LabelMask, ScoreMap)> {
    template_feats.same_grid(template_mask)?;
    if template_feats.dim() != target_feats.dim() {
        return Err(Error::DimensionMismatch {
            what: "template vs target feature dim",
            expected: template_feats.dim(),
            found: target_feats.dim(),
        });
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside [-1, 1]"
        )));
    }
    let roi = foreground_pixels(template_mask, label)?;
    if roi.is_empty() {
        return Err(Error::EmptyRegion { label });
    }
    let units: Vec<Vec<f64>> = roi.iter().map(|&p| unit(template_feats.at(p))).collect();
    let templates = match reduction {
        TemplateReduction::Mean => {
            let mut mean = vec![0.0; template_feats.dim()];
            for u in &units {
                mean.iter_mut().zip(u).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= units.len() as f64);
            vec![mean]
        }
        TemplateReduction::Max => units,
    };

    let sims: Vec<f64> = (0..target_feats.pixel_count())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = target_feats.at_index(i).iter().map(|&v| v as f64).collect();
            templates
                .iter()
                .map(|t| cosine_similarity(t, &x))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let labels = sims.iter().map(|&s| u8::from(s >= threshold)).collect();
    let (h, w) = (target_feats.height(), target_feats.width());
    Ok((LabelMask::new(h, w, 1, labels)?, ScoreMap::new(h, w, 1, sims)?))
}
