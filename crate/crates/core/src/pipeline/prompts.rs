//! Prompt selection, prompt files for an external refiner, and the built-in
//! flood-fill refiner.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{read_label_mask, IntensityImage, LabelMask, Pixel};
use crate::rng::{seeded, streams};
use crate::sampling::foreground_pixels;

/// Point prompts for one label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub label: u8,
    pub points: Vec<Pixel>,
}

/// Draws `min(n, |region|)` distinct pixels of `label`, listed in raster
/// order.
pub fn select_prompts(mask: &LabelMask, label: u8, n: usize, seed: u64) -> Result<PromptSet> {
    let region = foreground_pixels(mask, label)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion { label });
    }
    let mut rng = seeded(seed, streams::PROMPTS + u64::from(label));
    let mut picks = sample(&mut rng, region.len(), n.min(region.len())).into_vec();
    picks.sort_unstable();
    Ok(PromptSet {
        label,
        points: picks.into_iter().map(|i| region[i]).collect(),
    })
}

/// Everything an external refiner needs for one slice: the image path, its
/// size, and the prompts per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerRequest {
    pub image: String,
    pub height: usize,
    pub width: usize,
    #[serde(rename = "labels")]
    pub prompts: Vec<PromptSet>,
}

impl RefinerRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::invalid("prompt list is empty"));
        }
        for set in &self.prompts {
            if set.label == 0 {
                return Err(Error::invalid("prompts cannot target label 0"));
            }
            if set.points.is_empty() {
                return Err(Error::invalid(format!("label {} has no prompt points", set.label)));
            }
            if let Some(p) = set
                .points
                .iter()
                .find(|p| p.row >= self.height || p.col >= self.width)
            {
                return Err(Error::invalid(format!(
                    "prompt ({}, {}) outside {}x{}",
                    p.row, p.col, self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

pub fn export_prompts(request: &RefinerRequest, path: impl AsRef<Path>) -> Result<()> {
    request.validate()?;
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(request).expect("prompt request serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn import_prompts(path: impl AsRef<Path>) -> Result<RefinerRequest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let request: RefinerRequest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "prompt file",
        message: e.to_string(),
    })?;
    request.validate().map_err(|e| Error::Malformed {
        what: "prompt file",
        message: e.to_string(),
    })?;
    Ok(request)
}

/// Reads a refined mask produced externally and checks it matches the slice.
pub fn import_refined_mask(path: impl AsRef<Path>, height: usize, width: usize) -> Result<LabelMask> {
    let mask = read_label_mask(path)?;
    if mask.height() != height {
        return Err(Error::DimensionMismatch {
            what: "refined mask height",
            expected: height,
            found: mask.height(),
        });
    }
    if mask.width() != width {
        return Err(Error::DimensionMismatch {
            what: "refined mask width",
            expected: width,
            found: mask.width(),
        });
    }
    Ok(mask)
}

/// Turns point prompts plus an image into a binary mask.
pub trait Refiner {
    fn refine(&self, image: &IntensityImage, prompts: &PromptSet) -> Result<LabelMask>;
}

/// Flood fill from every prompt over 8-connected pixels whose intensity is
/// within `tolerance` of that prompt's own intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockRefiner {
    pub tolerance: f64,
}

impl Default for MockRefiner {
    fn default() -> Self {
        Self { tolerance: 0.5 }
    }
}

impl Refiner for MockRefiner {
    fn refine(&self, image: &IntensityImage, prompts: &PromptSet) -> Result<LabelMask> {
        mock_refine(image, prompts, self.tolerance)
    }
}

pub fn mock_refine(image: &IntensityImage, prompts: &PromptSet, tolerance: f64) -> Result<LabelMask> {
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::invalid(format!("tolerance {tolerance} must be non-negative")));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = LabelMask::background(h, w, 1)?;
    for &seed in &prompts.points {
        if seed.row >= h || seed.col >= w {
            return Err(Error::invalid(format!(
                "prompt ({}, {}) outside {h}x{w}",
                seed.row, seed.col
            )));
        }
        let level = f64::from(image.get(seed));
        let mut seen = vec![false; h * w];
        seen[seed.row * w + seed.col] = true;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            out.set(p, 1);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (r, c) = (p.row as isize + dr, p.col as isize + dc);
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let q = Pixel::new(r as usize, c as usize);
                    let i = q.row * w + q.col;
                    if !seen[i] && (f64::from(image.get(q)) - level).abs() <= tolerance {
                        seen[i] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_intensity() -> (IntensityImage, LabelMask) {
        let (h, w) = (12, 10);
        let mut data = vec![0.0; h * w];
        let mut labels = vec![0; h * w];
        for r in 3..8 {
            for c in 2..7 {
                data[r * w + c] = 1.0;
                labels[r * w + c] = 1;
            }
        }
        (
            IntensityImage::new(h, w, data).unwrap(),
            LabelMask::new(h, w, 1, labels).unwrap(),
        )
    }

    #[test]
    fn refiner_recovers_two_intensity_object() {
        let (image, gt) = two_intensity();
        let prompts = select_prompts(&gt, 1, 10, 3).unwrap();
        assert_eq!(prompts.points.len(), 10);
        assert_eq!(MockRefiner::default().refine(&image, &prompts).unwrap(), gt);
    }

    #[test]
    fn prompt_count_is_capped_by_region() {
        let (_, gt) = two_intensity();
        assert_eq!(select_prompts(&gt, 1, 100, 0).unwrap().points.len(), 25);
        let empty = LabelMask::background(3, 3, 1).unwrap();
        assert!(matches!(select_prompts(&empty, 1, 10, 0), Err(Error::EmptyRegion { label: 1 })));
    }

    #[test]
    fn out_of_bounds_prompt_rejected() {
        let (image, _) = two_intensity();
        let bad = PromptSet {
            label: 1,
            points: vec![Pixel::new(50, 0)],
        };
        assert!(mock_refine(&image, &bad, 0.5).is_err());
    }

    fn request() -> RefinerRequest {
        RefinerRequest {
            image: "image_000.pxf".into(),
            height: 12,
            width: 10,
            prompts: vec![PromptSet {
                label: 1,
                points: vec![Pixel::new(3, 4), Pixel::new(5, 5)],
            }],
        }
    }

    #[test]
    fn prompt_file_round_trip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        export_prompts(&request(), &path).unwrap();
        assert_eq!(import_prompts(&path).unwrap(), request());
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["labels"][0]["points"][1], serde_json::json!([5, 5]));
    }

    #[test]
    fn invalid_prompt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut empty = request();
        empty.prompts.clear();
        assert!(export_prompts(&empty, dir.path().join("a.json")).is_err());
        let path = dir.path().join("b.json");
        std::fs::write(&path, r#"{"image":"x","height":2,"width":2,"labels":[{"label":1,"points":[[5,0]]}]}"#).unwrap();
        assert!(matches!(import_prompts(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn refined_mask_shape_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pxm");
        crate::feature_store::write_label_mask(&LabelMask::background(4, 5, 1).unwrap(), &path).unwrap();
        assert!(import_refined_mask(&path, 4, 5).is_ok());
        assert!(matches!(
            import_refined_mask(&path, 4, 6),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn prompt_count_law(bits in prop::collection::vec(any::<bool>(), 36), n in 0usize..40, seed in any::<u64>()) {
            let labels: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
            let size = labels.iter().filter(|&&l| l == 1).count();
            let mask = LabelMask::new(6, 6, 1, labels).unwrap();
            match select_prompts(&mask, 1, n, seed) {
                Ok(set) => {
                    prop_assert_eq!(set.points.len(), n.min(size));
                    prop_assert!(set.points.iter().all(|&p| mask.get(p) == 1));
                    prop_assert!(set.points.windows(2).all(|w| w[0] != w[1]));
                    prop_assert_eq!(select_prompts(&mask, 1, n, seed).unwrap(), set);
                }
                Err(_) => prop_assert_eq!(size, 0),
            }
        }
    }
}
