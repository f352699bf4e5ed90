//! Integer-labelled instance masks, connected components and label-image I/O.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pixel adjacency used for connected components and flooding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// In-bounds neighbours of `(r, c)` in a `h x w` grid.
pub fn neighbours(
    (r, c): (usize, usize),
    (h, w): (usize, usize),
    conn: Connectivity,
) -> impl Iterator<Item = (usize, usize)> {
    conn.offsets().iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

/// Summary of one labelled instance. `bbox` is `(r0, c0, r1, c1)` with
/// exclusive `r1`, `c1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub area: usize,
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

/// Segmentation mask where 0 is background and `k > 0` is nucleus `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    labels: Array2<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self { labels: Array2::zeros((height, width)) }
    }

    pub fn from_array(labels: Array2<u32>) -> Self {
        Self { labels }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let labels = Array2::from_shape_vec((height, width), labels)
            .map_err(|e| Error::Shape(format!("instance map {height}x{width}: {e}")))?;
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Array2<u32> {
        &mut self.labels
    }

    pub fn into_array(self) -> Array2<u32> {
        self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[[r, c]]
    }

    /// Sorted distinct nonzero ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&v| v > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn num_instances(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&v| v == 0)
    }

    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|v| v > 0)
    }

    pub fn mask(&self, id: u32) -> Array2<bool> {
        self.labels.mapv(|v| v == id)
    }

    /// Per-instance area, bounding box and centroid, keyed by id.
    pub fn regions(&self) -> BTreeMap<u32, Region> {
        let mut acc: BTreeMap<u32, (usize, [usize; 4], f64, f64)> = BTreeMap::new();
        for ((r, c), &id) in self.labels.indexed_iter() {
            if id == 0 {
                continue;
            }
            let e = acc.entry(id).or_insert((0, [r, c, r + 1, c + 1], 0.0, 0.0));
            e.0 += 1;
            e.1 = [e.1[0].min(r), e.1[1].min(c), e.1[2].max(r + 1), e.1[3].max(c + 1)];
            e.2 += r as f64;
            e.3 += c as f64;
        }
        acc.into_iter()
            .map(|(id, (area, b, sr, sc))| {
                let n = area as f64;
                (id, Region { id, area, bbox: (b[0], b[1], b[2], b[3]), centroid: (sr / n, sc / n) })
            })
            .collect()
    }

    /// Pixel coordinates of every instance, keyed by id, in row-major order.
    pub fn pixel_lists(&self) -> BTreeMap<u32, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for ((r, c), &id) in self.labels.indexed_iter() {
            if id > 0 {
                out.entry(id).or_default().push((r, c));
            }
        }
        out
    }

    /// Renumber ids to `1..=N` keeping their ascending order.
    pub fn relabel_sequential(&self) -> Self {
        let lut: BTreeMap<u32, u32> = self.ids().into_iter().zip(1..).collect();
        Self { labels: self.labels.mapv(|v| if v == 0 { 0 } else { lut[&v] }) }
    }

    /// True when ids are exactly `1..=N`.
    pub fn is_sequential(&self) -> bool {
        self.ids().iter().enumerate().all(|(i, &id)| id as usize == i + 1)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let gray = img.into_luma16();
        let (w, h) = gray.dimensions();
        Self::from_vec(h as usize, w as usize, gray.into_raw().into_iter().map(u32::from).collect())
    }

    /// Writes a 16-bit grayscale PNG; fails when an id exceeds 65535.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dim();
        let mut raw = Vec::with_capacity(h * w);
        for &v in self.labels.iter() {
            let v = u16::try_from(v)
                .map_err(|_| Error::Shape(format!("instance id {v} does not fit a 16-bit label image")))?;
            raw.push(v);
        }
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Shape("label buffer size mismatch".into()))?;
        img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// Connected components of `mask`; ids are assigned `1..=N` in row-major
/// order of each component's first pixel.
pub fn label_components(mask: &Array2<bool>, conn: Connectivity) -> (Array2<u32>, usize) {
    let dim = mask.dim();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            labels[[r, c]] = next;
            stack.push((r, c));
            while let Some(p) = stack.pop() {
                for q in neighbours(p, dim, conn) {
                    if mask[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Pixel counts of labels `0..=n`.
pub fn component_sizes(labels: &Array2<u32>, n: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; n + 1];
    for &v in labels.iter() {
        sizes[v as usize] += 1;
    }
    sizes
}

/// `mask` with connected components smaller than `min_px` cleared.
pub fn remove_small_components(mask: &Array2<bool>, min_px: usize, conn: Connectivity) -> Array2<bool> {
    let (labels, n) = label_components(mask, conn);
    let sizes = component_sizes(&labels, n);
    labels.mapv(|v| v > 0 && sizes[v as usize] >= min_px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn components_are_numbered_in_scan_order() {
        let m = array![[true, false, true], [false, false, true], [true, false, false]];
        let (l4, n4) = label_components(&m, Connectivity::Four);
        assert_eq!(n4, 3);
        assert_eq!(l4, array![[1, 0, 2], [0, 0, 2], [3, 0, 0]]);
        let diag = array![[true, false], [false, true]];
        assert_eq!(label_components(&diag, Connectivity::Eight).1, 1);
        assert_eq!(label_components(&diag, Connectivity::Four).1, 2);
    }

    #[test]
    fn regions_report_bbox_and_centroid() {
        let map = InstanceMap::from_array(array![[0, 5, 5], [0, 5, 5], [7, 0, 0]]);
        let regions = map.regions();
        assert_eq!(regions[&5].area, 4);
        assert_eq!(regions[&5].bbox, (0, 1, 2, 3));
        assert_eq!(regions[&5].centroid, (0.5, 1.5));
        assert_eq!(map.relabel_sequential().labels(), &array![[0, 1, 1], [0, 1, 1], [2, 0, 0]]);
    }

    #[test]
    fn png_round_trip_keeps_16_bit_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.png");
        let map = InstanceMap::from_array(array![[0, 300], [65535, 1]]);
        map.write_png(&path).unwrap();
        assert_eq!(InstanceMap::read_png(&path).unwrap(), map);
        let too_big = InstanceMap::from_array(array![[70000u32]]);
        assert!(too_big.write_png(&path).is_err());
    }
}
