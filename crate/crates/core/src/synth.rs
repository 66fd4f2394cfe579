//! Synthetic slices with known regions, for tests and demos.
//!
//! Each pixel belongs to one cluster. Its feature vector is
//! `drift * (u + noise * e)` where `u` is the cluster's unit direction, `e`
//! is standard normal noise and `drift` is a per-slice scale. Its intensity
//! is `drift * intensity` without noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, IntensityImage, LabelMask, Pixel};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Disk {
        row: usize,
        col: usize,
        radius: f64,
    },
}

impl Shape {
    /// Whether pixel (r, c) lies inside the shape translated by `offset`.
    fn contains(&self, r: i64, c: i64, offset: (i64, i64)) -> bool {
        let (r, c) = (r - offset.0, c - offset.1);
        match *self {
            Shape::Rect {
                top,
                left,
                height,
                width,
            } => {
                let (top, left) = (top as i64, left as i64);
                r >= top && r < top + height as i64 && c >= left && c < left + width as i64
            }
            Shape::Disk { row, col, radius } => {
                let (dr, dc) = ((r - row as i64) as f64, (c - col as i64) as f64);
                dr * dr + dc * dc <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Unit vector along one feature axis.
    Axis(usize),
    /// Any nonzero vector; normalised before use.
    Vector(Vec<f64>),
}

impl Direction {
    fn unit(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            Direction::Axis(a) if *a < dim => {
                let mut v = vec![0.0; dim];
                v[*a] = 1.0;
                Ok(v)
            }
            Direction::Axis(a) => Err(Error::invalid(format!("axis {a} outside dim {dim}"))),
            Direction::Vector(v) => {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "direction length",
                        expected: dim,
                        found: v.len(),
                    });
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::invalid("direction must be finite and nonzero"));
                }
                Ok(v.iter().map(|x| x / n).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// 0 for background clusters, the region label otherwise.
    pub label: u8,
    /// `None` fills the whole slice (only meaningful for the first background
    /// cluster).
    #[serde(default)]
    pub shape: Option<Shape>,
    pub direction: Direction,
    pub noise: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Painted in order; the first one fills the slice.
    pub background: Vec<Cluster>,
    /// Labelled regions, painted after the background.
    pub regions: Vec<Cluster>,
    /// One feature/intensity scale per slice; its length is the slice count.
    pub drift: Vec<f64>,
    /// Per-slice `(row, col)` translation of the regions; empty means none.
    #[serde(default)]
    pub offsets: Vec<(i64, i64)>,
    /// Slices on which no region is painted.
    #[serde(default)]
    pub empty_slices: Vec<usize>,
    pub seed: u64,
}

/// Which cluster produced a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterRef {
    Background(usize),
    Region(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlice {
    pub features: FeatureMap,
    pub mask: LabelMask,
    pub image: IntensityImage,
    pub assignment: Vec<ClusterRef>,
}

impl SynthSlice {
    /// Pixels generated by `cluster`, in raster order.
    pub fn cluster_pixels(&self, cluster: ClusterRef) -> Vec<Pixel> {
        let w = self.mask.width();
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == cluster)
            .map(|(i, _)| Pixel::new(i / w, i % w))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub slices: Vec<SynthSlice>,
}

impl ScenarioSpec {
    pub fn label_count(&self) -> u8 {
        self.regions.iter().map(|r| r.label).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::InvalidShape(format!(
                "{}x{}x{} scenario",
                self.height, self.width, self.dim
            )));
        }
        if self.drift.is_empty() {
            return Err(Error::invalid("scenario needs at least one slice"));
        }
        if let Some(d) = self.drift.iter().find(|d| **d <= 0.0 || !d.is_finite()) {
            return Err(Error::invalid(format!("drift {d} must be positive")));
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.drift.len() {
            return Err(Error::DimensionMismatch {
                what: "offsets per slice",
                expected: self.drift.len(),
                found: self.offsets.len(),
            });
        }
        if let Some(s) = self.empty_slices.iter().find(|&&s| s >= self.drift.len()) {
            return Err(Error::invalid(format!("empty slice {s} out of range")));
        }
        if self.background.is_empty() {
            return Err(Error::invalid("scenario needs a background cluster"));
        }
        if self.regions.is_empty() {
            return Err(Error::invalid("scenario needs at least one region"));
        }
        for b in &self.background {
            if b.label != 0 {
                return Err(Error::invalid("background clusters must have label 0"));
            }
        }
        for r in &self.regions {
            if r.label == 0 || r.shape.is_none() {
                return Err(Error::invalid("regions need a nonzero label and a shape"));
            }
        }
        for c in self.background.iter().chain(&self.regions) {
            c.direction.unit(self.dim)?;
            if c.noise.is_nan() || c.noise < 0.0 || !c.intensity.is_finite() {
                return Err(Error::invalid("noise must be non-negative, intensity finite"));
            }
        }
        Ok(())
    }

    fn assignment(&self, slice: usize) -> Result<Vec<ClusterRef>> {
        let offset = self.offsets.get(slice).copied().unwrap_or((0, 0));
        let painted = !self.empty_slices.contains(&slice);
        let mut out = vec![ClusterRef::Background(0); self.height * self.width];
        for r in 0..self.height {
            for c in 0..self.width {
                let (ri, ci) = (r as i64, c as i64);
                let cell = &mut out[r * self.width + c];
                for (k, b) in self.background.iter().enumerate() {
                    if b.shape.as_ref().is_some_and(|s| s.contains(ri, ci, (0, 0))) {
                        *cell = ClusterRef::Background(k);
                    }
                }
                if !painted {
                    continue;
                }
                let mut owner: Option<u8> = None;
                for (k, reg) in self.regions.iter().enumerate() {
                    if reg.shape.as_ref().is_some_and(|s| s.contains(ri, ci, offset)) {
                        if owner.is_some_and(|l| l != reg.label) {
                            return Err(Error::invalid(format!(
                                "regions with different labels overlap at ({r}, {c}) on slice {slice}"
                            )));
                        }
                        owner = Some(reg.label);
                        *cell = ClusterRef::Region(k);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Generates every slice of the scenario. Same spec, same bytes.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let units: Vec<Vec<f64>> = spec
        .background
        .iter()
        .chain(&spec.regions)
        .map(|c| c.direction.unit(spec.dim))
        .collect::<Result<_>>()?;
    let cluster = |c: ClusterRef| match c {
        ClusterRef::Background(k) => (&spec.background[k], &units[k]),
        ClusterRef::Region(k) => (&spec.regions[k], &units[spec.background.len() + k]),
    };
    let slices = spec
        .drift
        .iter()
        .enumerate()
        .map(|(s, &drift)| {
            let assignment = spec.assignment(s)?;
            let mut rng = seeded(spec.seed, streams::SYNTH + s as u64);
            let n = assignment.len();
            let mut feats = Vec::with_capacity(n * spec.dim);
            let mut labels = Vec::with_capacity(n);
            let mut image = Vec::with_capacity(n);
            for &a in &assignment {
                let (c, u) = cluster(a);
                for &x in u {
                    let e: f64 = rng.sample(StandardNormal);
                    feats.push((drift * (x + c.noise * e)) as f32);
                }
                labels.push(c.label);
                image.push((drift * c.intensity) as f32);
            }
            Ok(SynthSlice {
                features: FeatureMap::new(spec.height, spec.width, spec.dim, feats)?,
                mask: LabelMask::new(spec.height, spec.width, spec.label_count(), labels)?,
                image: IntensityImage::new(spec.height, spec.width, image)?,
                assignment,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scenario {
        spec: spec.clone(),
        slices,
    })
}

fn rect(top: usize, left: usize, height: usize, width: usize) -> Option<Shape> {
    Some(Shape::Rect {
        top,
        left,
        height,
        width,
    })
}

fn cluster(label: u8, shape: Option<Shape>, direction: Direction, noise: f64, intensity: f64) -> Cluster {
    Cluster {
        label,
        shape,
        direction,
        noise,
        intensity,
    }
}

/// 64x64, 32 channels, three labels on their own axes over two background
/// clusters; six slices with mild drift and small region shifts (use slices
/// 0-1 for training, 2-5 for testing).
pub fn separable_scenario(seed: u64) -> ScenarioSpec {
    let noise = 0.1;
    ScenarioSpec {
        height: 64,
        width: 64,
        dim: 32,
        background: vec![
            cluster(0, None, Direction::Axis(3), noise, 0.0),
            cluster(0, rect(44, 40, 16, 20), Direction::Axis(4), noise, 0.0),
        ],
        regions: vec![
            cluster(1, rect(8, 8, 12, 16), Direction::Axis(0), noise, 1.0),
            cluster(
                2,
                Some(Shape::Disk {
                    row: 42,
                    col: 18,
                    radius: 7.0,
                }),
                Direction::Axis(1),
                noise,
                2.0,
            ),
            cluster(3, rect(24, 42, 10, 10), Direction::Axis(2), noise, 3.0),
        ],
        drift: vec![1.0, 1.2, 0.85, 1.1, 0.9, 1.3],
        offsets: vec![(0, 0), (1, -1), (-2, 1), (2, 2), (-1, -2), (0, 3)],
        empty_slices: Vec::new(),
        seed,
    }
}

/// Index of the confound cluster in [`confound_scenario`]'s background.
pub const CONFOUND_CLUSTER: usize = 1;

/// 64x64, 32 channels, one label along `e0`. A background cluster along
/// `0.8 e0 + 0.6 e1` has cosine 0.8 with the foreground direction, so a fixed
/// cosine threshold mistakes it for foreground; the rest of the background
/// lies along `e2`. Feature scale drifts strongly from slice to slice.
pub fn confound_scenario(seed: u64) -> ScenarioSpec {
    let dim = 32;
    let mut confound = vec![0.0; dim];
    confound[0] = 0.8;
    confound[1] = 0.6;
    let noise = 0.05;
    ScenarioSpec {
        height: 64,
        width: 64,
        dim,
        background: vec![
            cluster(0, None, Direction::Axis(2), noise, 0.0),
            cluster(0, rect(6, 36, 52, 24), Direction::Vector(confound), noise, 0.5),
        ],
        regions: vec![cluster(1, rect(22, 10, 16, 16), Direction::Axis(0), noise, 1.0)],
        drift: vec![1.0, 1.6, 0.7, 1.3, 2.0, 0.5],
        offsets: vec![(0, 0), (3, 2), (-4, 1), (5, -3), (-2, 4), (2, -2)],
        empty_slices: Vec::new(),
        seed,
    }
}

/// One 32x32 slice whose object has intensity 1 on a background of 0.
pub fn two_intensity_scenario(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        height: 32,
        width: 32,
        dim: 8,
        background: vec![cluster(0, None, Direction::Axis(1), 0.1, 0.0)],
        regions: vec![cluster(
            1,
            Some(Shape::Disk {
                row: 15,
                col: 14,
                radius: 6.0,
            }),
            Direction::Axis(0),
            0.1,
            1.0,
        )],
        drift: vec![1.0],
        offsets: Vec::new(),
        empty_slices: Vec::new(),
        seed,
    }
}

/// The separable scenario with every slice from `first_empty` on left
/// background-only.
pub fn empty_slice_scenario(seed: u64, first_empty: usize) -> ScenarioSpec {
    let mut spec = separable_scenario(seed);
    spec.empty_slices = (first_empty..spec.drift.len()).collect();
    spec
}
