//! Seeded construction of training sets and reference pixels.
//!
//! Classification sets take every foreground pixel and a class-balanced draw
//! of background pixels. Pair sets hold, per label, positive pairs (two
//! distinct pixels of the label) and negative pairs (an anchor in the label
//! and a partner outside it). All negatives share pair class `0`.
//!
//! The `_pooled` variants draw from several annotated slices at once; the
//! single-slice functions are the one-element case.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, LabelMask, Pixel};
use crate::rng::{seeded, streams};

/// Where a sampled vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub slice: usize,
    pub pixel: Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationEntry {
    pub source: Source,
    pub features: Vec<f32>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub entries: Vec<ClassificationEntry>,
    pub class_count: usize,
}

impl ClassificationSet {
    pub fn count(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub reference: Vec<f32>,
    pub target: Vec<f32>,
    pub class: usize,
    pub reference_source: Source,
    pub target_source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub entries: Vec<PairEntry>,
    pub pair_class_count: usize,
}

impl PairSet {
    pub fn count(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub label: u8,
    pub coordinates: Vec<Pixel>,
    pub features: Vec<Vec<f32>>,
}

impl ReferenceSet {
    pub fn k(&self) -> usize {
        self.coordinates.len()
    }
}

/// Pixels carrying `label`, in row-major order.
pub fn foreground_pixels(mask: &LabelMask, label: u8) -> Result<Vec<Pixel>> {
    if label == 0 || label > mask.label_count() {
        return Err(Error::LabelOutOfRange {
            label: label as u32,
            label_count: mask.label_count() as u32,
        });
    }
    Ok(pixels_with(mask, label))
}

fn pixels_with(mask: &LabelMask, label: u8) -> Vec<Pixel> {
    mask.labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| mask.pixel_at(i))
        .collect()
}

fn check_slices(slices: &[(&FeatureMap, &LabelMask)]) -> Result<u8> {
    let first = slices
        .first()
        .ok_or_else(|| Error::invalid("no annotated slices supplied"))?;
    let label_count = first.1.label_count();
    let dim = first.0.dim();
    for (features, mask) in slices {
        features.same_grid(mask)?;
        if features.dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "feature dim across slices",
                expected: dim,
                found: features.dim(),
            });
        }
        if mask.label_count() != label_count {
            return Err(Error::DimensionMismatch {
                what: "label count across slices",
                expected: label_count as usize,
                found: mask.label_count() as usize,
            });
        }
    }
    if label_count == 0 {
        return Err(Error::invalid("mask declares no foreground labels"));
    }
    Ok(label_count)
}

fn sources_with(slices: &[(&FeatureMap, &LabelMask)], label: u8) -> Vec<Source> {
    slices
        .iter()
        .enumerate()
        .flat_map(|(slice, (_, mask))| {
            pixels_with(mask, label)
                .into_iter()
                .map(move |pixel| Source { slice, pixel })
        })
        .collect()
}

fn vector(slices: &[(&FeatureMap, &LabelMask)], s: Source) -> Vec<f32> {
    slices[s.slice].0.at(s.pixel).to_vec()
}

pub fn sample_classification_set(
    features: &FeatureMap,
    mask: &LabelMask,
    seed: u64,
) -> Result<ClassificationSet> {
    sample_classification_set_pooled(&[(features, mask)], seed)
}

/// All foreground pixels of every label plus a background draw without
/// replacement whose size equals the largest per-label foreground count.
pub fn sample_classification_set_pooled(
    slices: &[(&FeatureMap, &LabelMask)],
    seed: u64,
) -> Result<ClassificationSet> {
    let label_count = check_slices(slices)?;
    let mut entries = Vec::new();
    let mut largest = 0;
    for label in 1..=label_count {
        let fg = sources_with(slices, label);
        if fg.is_empty() {
            return Err(Error::EmptyRegion { label });
        }
        largest = largest.max(fg.len());
        entries.extend(fg.into_iter().map(|source| ClassificationEntry {
            features: vector(slices, source),
            source,
            class: label as usize,
        }));
    }

    let pool = sources_with(slices, 0);
    if pool.len() < largest {
        return Err(Error::BackgroundPoolTooSmall {
            needed: largest,
            available: pool.len(),
        });
    }
    let mut rng = seeded(seed, streams::CLASSIFICATION_SET);
    let mut picked = index::sample(&mut rng, pool.len(), largest).into_vec();
    picked.sort_unstable();
    entries.extend(picked.into_iter().map(|i| ClassificationEntry {
        source: pool[i],
        features: vector(slices, pool[i]),
        class: 0,
    }));

    Ok(ClassificationSet {
        entries,
        class_count: label_count as usize + 1,
    })
}

pub fn sample_contrastive_pairs(
    features: &FeatureMap,
    mask: &LabelMask,
    pairs_per_label: usize,
    min_negative_offset: usize,
    seed: u64,
) -> Result<PairSet> {
    sample_contrastive_pairs_pooled(&[(features, mask)], pairs_per_label, min_negative_offset, seed)
}

/// Per label: `pairs_per_label` positive pairs with class = label and
/// `pairs_per_label` negative pairs with class 0. Negative partners lie
/// outside the label at Chebyshev distance `>= min_negative_offset` from the
/// label's region in their own slice. The anchor always takes the reference
/// slot.
pub fn sample_contrastive_pairs_pooled(
    slices: &[(&FeatureMap, &LabelMask)],
    pairs_per_label: usize,
    min_negative_offset: usize,
    seed: u64,
) -> Result<PairSet> {
    let label_count = check_slices(slices)?;
    if pairs_per_label == 0 {
        return Err(Error::invalid("pairs_per_label must be at least 1"));
    }
    let mut entries = Vec::with_capacity(2 * pairs_per_label * label_count as usize);
    for label in 1..=label_count {
        let roi = sources_with(slices, label);
        if roi.len() < 2 {
            return Err(Error::RegionTooSmall {
                label,
                size: roi.len(),
            });
        }
        let admissible: Vec<Source> = slices
            .iter()
            .enumerate()
            .flat_map(|(slice, (_, mask))| {
                let distance = chebyshev_distance_to(mask, label);
                distance
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, d)| d >= min_negative_offset.max(1))
                    .map(move |(i, _)| Source {
                        slice,
                        pixel: mask.pixel_at(i),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        if admissible.is_empty() {
            return Err(Error::NoAdmissibleNegative {
                label,
                offset: min_negative_offset,
            });
        }

        let mut rng = seeded(seed, streams::PAIRS + label as u64);
        for _ in 0..pairs_per_label {
            let a = rng.random_range(0..roi.len());
            let mut b = rng.random_range(0..roi.len() - 1);
            if b >= a {
                b += 1;
            }
            entries.push(pair(slices, roi[a], roi[b], label as usize));
        }
        for _ in 0..pairs_per_label {
            let anchor = roi[rng.random_range(0..roi.len())];
            let partner = admissible[rng.random_range(0..admissible.len())];
            entries.push(pair(slices, anchor, partner, 0));
        }
    }
    Ok(PairSet {
        entries,
        pair_class_count: label_count as usize + 1,
    })
}

fn pair(slices: &[(&FeatureMap, &LabelMask)], a: Source, b: Source, class: usize) -> PairEntry {
    PairEntry {
        reference: vector(slices, a),
        target: vector(slices, b),
        class,
        reference_source: a,
        target_source: b,
    }
}

/// Chessboard distance from every pixel to the nearest pixel carrying
/// `label`; `usize::MAX` everywhere if the label is absent. Two-pass chamfer
/// with unit weights on all eight neighbours, which is exact for this metric.
pub fn chebyshev_distance_to(mask: &LabelMask, label: u8) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    let inf = usize::MAX;
    let mut d: Vec<usize> = mask
        .labels()
        .iter()
        .map(|&l| if l == label { 0 } else { inf })
        .collect();
    let relax = |d: &mut Vec<usize>, r: usize, c: usize, nr: isize, nc: isize| {
        if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
            return;
        }
        let n = d[nr as usize * w + nc as usize];
        if n != inf && n + 1 < d[r * w + c] {
            d[r * w + c] = n + 1;
        }
    };
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            for (dr, dc) in [(-1, -1), (-1, 0), (-1, 1), (0, -1)] {
                relax(&mut d, r, c, ri + dr, ci + dc);
            }
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let (ri, ci) = (r as isize, c as isize);
            for (dr, dc) in [(1, 1), (1, 0), (1, -1), (0, 1)] {
                relax(&mut d, r, c, ri + dr, ci + dc);
            }
        }
    }
    d
}

/// `min(k, region size)` distinct pixels of `label`, uniformly without
/// replacement, returned in row-major order.
pub fn select_reference_pixels(
    features: &FeatureMap,
    mask: &LabelMask,
    label: u8,
    k: usize,
    seed: u64,
) -> Result<ReferenceSet> {
    features.same_grid(mask)?;
    if k == 0 {
        return Err(Error::invalid("reference count k must be at least 1"));
    }
    let roi = foreground_pixels(mask, label)?;
    if roi.is_empty() {
        return Err(Error::EmptyRegion { label });
    }
    let mut rng = seeded(seed, streams::REFERENCES + label as u64);
    let mut picked = index::sample(&mut rng, roi.len(), k.min(roi.len())).into_vec();
    picked.sort_unstable();
    let coordinates: Vec<Pixel> = picked.into_iter().map(|i| roi[i]).collect();
    let features = coordinates.iter().map(|&p| features.at(p).to_vec()).collect();
    Ok(ReferenceSet {
        label,
        coordinates,
        features,
    })
}
