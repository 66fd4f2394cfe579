//! Connected components of label masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{LabelMask, Pixel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Edge neighbours only.
    #[serde(rename = "4")]
    Four,
    /// Edge and corner neighbours.
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_neighbours(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn neighbours(self) -> u32 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }

    /// Neighbour offsets already visited in a raster scan.
    fn causal_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0)],
            Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller index becomes the root, so roots are first-in-raster-order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Component labelling of a mask: same-label pixels joined under the chosen
/// connectivity. Component ids are numbered in raster order of each
/// component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    width: usize,
    /// Component id per pixel, `None` for background.
    ids: Vec<Option<usize>>,
    sizes: Vec<usize>,
    labels: Vec<u8>,
}

impl Components {
    pub fn of(mask: &LabelMask, connectivity: Connectivity) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let labels = mask.labels();
        let mut sets = DisjointSet::new(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if labels[i] == 0 {
                    continue;
                }
                for &(dr, dc) in connectivity.causal_offsets() {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if labels[j] == labels[i] {
                        sets.union(i, j);
                    }
                }
            }
        }
        let mut root_id = vec![usize::MAX; h * w];
        let mut ids = vec![None; h * w];
        let mut sizes = Vec::new();
        let mut comp_labels = Vec::new();
        for i in 0..h * w {
            if labels[i] == 0 {
                continue;
            }
            let root = sets.find(i);
            if root_id[root] == usize::MAX {
                root_id[root] = sizes.len();
                sizes.push(0);
                comp_labels.push(labels[i]);
            }
            let id = root_id[root];
            sizes[id] += 1;
            ids[i] = Some(id);
        }
        Self {
            width: w,
            ids,
            sizes,
            labels: comp_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Label carried by each component.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn id_at(&self, p: Pixel) -> Option<usize> {
        self.ids[p.row * self.width + p.col]
    }

    /// Pixels of component `id` in raster order.
    pub fn pixels(&self, id: usize) -> impl Iterator<Item = Pixel> + '_ {
        let w = self.width;
        self.ids
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == Some(id))
            .map(move |(i, _)| Pixel::new(i / w, i % w))
    }
}

/// Clears every component smaller than `min_size` pixels, label by label.
pub fn filter_components(mask: &LabelMask, connectivity: Connectivity, min_size: usize) -> LabelMask {
    let comps = Components::of(mask, connectivity);
    let labels = mask
        .labels()
        .iter()
        .zip(&comps.ids)
        .map(|(&l, id)| match id {
            Some(id) if comps.sizes[*id] >= min_size => l,
            _ => 0,
        })
        .collect();
    LabelMask::new(mask.height(), mask.width(), mask.label_count(), labels)
        .expect("filtering keeps the mask shape and labels")
}

/// Rounded centroid of the largest component of `label` (ties to the
/// component met first in raster order), or `None` if the label is absent.
pub fn landmark_from_mask(mask: &LabelMask, label: u8, connectivity: Connectivity) -> Option<Pixel> {
    let comps = Components::of(mask, connectivity);
    let mut best: Option<usize> = None;
    for id in 0..comps.len() {
        if comps.labels[id] == label && best.is_none_or(|b| comps.sizes[id] > comps.sizes[b]) {
            best = Some(id);
        }
    }
    let id = best?;
    let (mut sr, mut sc) = (0.0, 0.0);
    for p in comps.pixels(id) {
        sr += p.row as f64;
        sc += p.col as f64;
    }
    let n = comps.sizes[id] as f64;
    Some(Pixel::new((sr / n).round() as usize, (sc / n).round() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn mask(rows: &[&str]) -> LabelMask {
        let w = rows[0].len();
        let labels: Vec<u8> = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| if b == b'.' { 0 } else { b - b'0' }))
            .collect();
        let lc = labels.iter().copied().max().unwrap_or(0).max(1);
        LabelMask::new(rows.len(), w, lc, labels).unwrap()
    }

    #[test]
    fn diagonal_pixels_join_only_under_eight() {
        let m = mask(&["1.", ".1"]);
        assert_eq!(Components::of(&m, Connectivity::Four).len(), 2);
        assert_eq!(Components::of(&m, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn different_labels_stay_apart() {
        let m = mask(&["12", "12"]);
        let c = Components::of(&m, Connectivity::Eight);
        assert_eq!(c.len(), 2);
        assert_eq!(c.labels(), &[1, 2]);
        assert_eq!(c.sizes(), &[2, 2]);
    }

    #[test]
    fn u_shape_merges_late() {
        let m = mask(&["1.1", "1.1", "111"]);
        assert_eq!(Components::of(&m, Connectivity::Four).len(), 1);
    }

    #[test]
    fn filter_drops_small_components() {
        let m = mask(&["11..", "11..", "...1"]);
        let f = filter_components(&m, Connectivity::Four, 2);
        assert_eq!(f, mask(&["11..", "11..", "...."]));
        let f8 = filter_components(&m, Connectivity::Eight, 1);
        assert_eq!(f8, m);
        assert_eq!(filter_components(&m, Connectivity::Eight, 5), LabelMask::background(3, 4, 1).unwrap());
    }

    #[test]
    fn landmark_is_centroid_of_largest() {
        let m = mask(&["111..", "111..", "111.1", "....."]);
        assert_eq!(landmark_from_mask(&m, 1, Connectivity::Eight), Some(Pixel::new(1, 1)));
        assert_eq!(landmark_from_mask(&m, 2, Connectivity::Eight), None);
        let tie = mask(&["1..1"]);
        assert_eq!(landmark_from_mask(&tie, 1, Connectivity::Eight), Some(Pixel::new(0, 0)));
    }

    #[test]
    fn connectivity_parsing() {
        assert_eq!(Connectivity::from_neighbours(4).unwrap(), Connectivity::Four);
        assert!(Connectivity::from_neighbours(6).is_err());
        assert_eq!(serde_json::to_string(&Connectivity::Eight).unwrap(), "\"8\"");
    }

    /// Independent flood-fill count of components, for cross-checking.
    fn bfs_sizes(m: &LabelMask, conn: Connectivity) -> Vec<usize> {
        let (h, w) = (m.height(), m.width());
        let mut seen = vec![false; h * w];
        let mut sizes = Vec::new();
        for start in 0..h * w {
            if seen[start] || m.labels()[start] == 0 {
                continue;
            }
            let l = m.labels()[start];
            seen[start] = true;
            let mut q = VecDeque::from([start]);
            let mut n = 0;
            while let Some(i) = q.pop_front() {
                n += 1;
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        if (dr, dc) == (0, 0) || (conn == Connectivity::Four && dr != 0 && dc != 0) {
                            continue;
                        }
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let j = nr as usize * w + nc as usize;
                        if !seen[j] && m.labels()[j] == l {
                            seen[j] = true;
                            q.push_back(j);
                        }
                    }
                }
            }
            sizes.push(n);
        }
        sizes
    }

    fn random_mask() -> impl Strategy<Value = LabelMask> {
        (1usize..12, 1usize..12, 1u8..=3).prop_flat_map(|(h, w, lc)| {
            prop::collection::vec(0..=lc, h * w)
                .prop_map(move |v| LabelMask::new(h, w, lc, v).unwrap())
        })
    }

    fn conn() -> impl Strategy<Value = Connectivity> {
        prop_oneof![Just(Connectivity::Four), Just(Connectivity::Eight)]
    }

    proptest! {
        #[test]
        fn matches_bfs(m in random_mask(), c in conn()) {
            prop_assert_eq!(Components::of(&m, c).sizes().to_vec(), bfs_sizes(&m, c));
        }

        #[test]
        fn filter_is_idempotent_and_shrinking(m in random_mask(), c in conn(), k in 0usize..6) {
            let once = filter_components(&m, c, k);
            prop_assert_eq!(&filter_components(&once, c, k), &once);
            for (a, b) in once.labels().iter().zip(m.labels()) {
                prop_assert!(*a == 0 || a == b);
            }
            prop_assert!(Components::of(&once, c).sizes().iter().all(|&s| s >= k));
        }
    }
}
