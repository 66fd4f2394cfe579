//! Feature maps, label masks and the patch-grid to pixel-grid upsampling that
//! produces pixel-level features.

mod io;

pub use io::{
    read_feature_map, read_label_mask, write_feature_map, write_label_mask, FEATURE_MAGIC,
    MASK_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel position, serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(self, other: Pixel) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    pub fn euclidean(self, other: Pixel) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

impl From<[usize; 2]> for Pixel {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Pixel> for [usize; 2] {
    fn from(p: Pixel) -> Self {
        [p.row, p.col]
    }
}

/// An `height x width` grid of `dim`-channel feature vectors, row-major and
/// channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidShape(format!(
                "feature map {height}x{width}x{dim} has a zero extent"
            )));
        }
        let expected = height * width * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "feature map data length",
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, p: Pixel) -> &[f32] {
        self.at_index(p.row * self.width + p.col)
    }

    #[inline]
    pub fn at_index(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Feature vector widened to 64 bits.
    pub fn vector_f64(&self, p: Pixel) -> Vec<f64> {
        self.at(p).iter().map(|&v| v as f64).collect()
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn same_grid(&self, mask: &LabelMask) -> Result<()> {
        check_same_grid(self.height, self.width, mask.height(), mask.width())
    }
}

pub(crate) fn check_same_grid(h: usize, w: usize, other_h: usize, other_w: usize) -> Result<()> {
    if h != other_h {
        return Err(Error::DimensionMismatch {
            what: "grid height",
            expected: h,
            found: other_h,
        });
    }
    if w != other_w {
        return Err(Error::DimensionMismatch {
            what: "grid width",
            expected: w,
            found: other_w,
        });
    }
    Ok(())
}

/// Patch-level features before upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::InvalidShape(format!(
                "patch grid {rows}x{cols}x{dim} is degenerate"
            )));
        }
        let expected = rows * cols * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "patch grid data length",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn at(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Per-pixel integer labels, `0` is background and `1..=label_count` are
/// regions of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    label_count: u8,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, label_count: u8, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "label mask {height}x{width} has a zero extent"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                what: "label mask length",
                expected: height * width,
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > label_count) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                label_count: label_count as u32,
            });
        }
        Ok(Self {
            height,
            width,
            label_count,
            labels,
        })
    }

    pub fn background(height: usize, width: usize, label_count: u8) -> Result<Self> {
        Self::new(height, width, label_count, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_count(&self) -> u8 {
        self.label_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixel_count(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn get(&self, p: Pixel) -> u8 {
        self.labels[p.row * self.width + p.col]
    }

    pub(crate) fn set(&mut self, p: Pixel, label: u8) {
        debug_assert!(label <= self.label_count);
        self.labels[p.row * self.width + p.col] = label;
    }

    #[inline]
    pub fn pixel_at(&self, index: usize) -> Pixel {
        Pixel::new(index / self.width, index % self.width)
    }

    pub fn in_bounds(&self, p: Pixel) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of the pixels carrying `label`.
    pub fn binary(&self, label: u8) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            label_count: 1,
            labels: self.labels.iter().map(|&l| u8::from(l == label)).collect(),
        }
    }
}

/// Bilinear upsampling with the align-corners-false convention: output pixel
/// `i` samples the grid at `(i + 0.5) * rows / out_height - 0.5`, clamped to
/// the grid extent.
pub fn interpolate_patch_grid(
    grid: &PatchGrid,
    out_height: usize,
    out_width: usize,
) -> Result<FeatureMap> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::InvalidShape(format!(
            "output size {out_height}x{out_width} has a zero extent"
        )));
    }
    let rows = axis_weights(grid.rows, out_height);
    let cols = axis_weights(grid.cols, out_width);
    let dim = grid.dim;
    let mut data = vec![0.0f32; out_height * out_width * dim];
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let out = &mut data[(i * out_width + j) * dim..(i * out_width + j + 1) * dim];
            let corners = [
                (grid.at(r0, c0), (1.0 - fr) * (1.0 - fc)),
                (grid.at(r0, c1), (1.0 - fr) * fc),
                (grid.at(r1, c0), fr * (1.0 - fc)),
                (grid.at(r1, c1), fr * fc),
            ];
            for (k, o) in out.iter_mut().enumerate() {
                let v: f64 = corners.iter().map(|(p, w)| p[k] as f64 * w).sum();
                *o = v as f32;
            }
        }
    }
    FeatureMap::new(out_height, out_width, dim, data)
}

/// For each output index: lower source index, upper source index, fraction
/// toward the upper one.
fn axis_weights(src: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Scales every pixel vector to unit Euclidean norm. Vectors with norm below
/// `epsilon` become all-zero.
pub fn l2_normalize(map: &FeatureMap, epsilon: f64) -> FeatureMap {
    let mut data = Vec::with_capacity(map.data.len());
    for v in map.pixels() {
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm < epsilon {
            data.extend(std::iter::repeat_n(0.0f32, v.len()));
        } else {
            data.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
        }
    }
    FeatureMap {
        height: map.height,
        width: map.width,
        dim: map.dim,
        data,
    }
}

/// Single-channel intensity image used by refiners, stored on disk as a
/// one-channel feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl IntensityImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let map = FeatureMap::new(height, width, 1, data)?;
        Ok(Self::from_feature_map(map).expect("dim is 1"))
    }

    pub fn from_feature_map(map: FeatureMap) -> Result<Self> {
        if map.dim != 1 {
            return Err(Error::DimensionMismatch {
                what: "intensity image channels",
                expected: 1,
                found: map.dim,
            });
        }
        Ok(Self {
            height: map.height,
            width: map.width,
            data: map.data,
        })
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            dim: 1,
            data: self.data.clone(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, p: Pixel) -> f32 {
        self.data[p.row * self.width + p.col]
    }
}
