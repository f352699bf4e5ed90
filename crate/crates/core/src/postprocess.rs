//! Network output to labelled nuclei: foreground threshold, HV-gradient
//! energy, marker-controlled watershed, morphological cleanup and typing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::instance::{label_components, neighbours, remove_small_components, Connectivity, InstanceMap};
use crate::losses::softmax_channels;
use crate::network::NetworkOutput;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessParams {
    pub np_threshold: f32,
    pub energy_threshold: f32,
    pub min_object_px: usize,
    pub min_marker_px: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            np_threshold: 0.5,
            energy_threshold: 0.4,
            min_object_px: 10,
            min_marker_px: 10,
            connectivity: Connectivity::Eight,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("np_threshold", self.np_threshold), ("energy_threshold", self.energy_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One detected nucleus. `bbox` is `(r0, c0, r1, c1)` with exclusive ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypedNucleus {
    pub id: u32,
    #[serde(rename = "class")]
    pub class_id: u8,
    #[serde(rename = "prob")]
    pub class_prob: f32,
    pub centroid: (f64, f64),
    pub bbox: (usize, usize, usize, usize),
    #[serde(rename = "area")]
    pub area_px: usize,
}

/// Per-pixel maps of one image derived from the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaps {
    /// `[H, W]` nucleus probability.
    pub np_prob: Array2<f32>,
    /// `[2, H, W]` horizontal then vertical.
    pub hv: Array3<f32>,
    /// `[C, H, W]` class probabilities.
    pub nt_prob: Array3<f32>,
}

fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Shape(e.to_string()))
}

impl ImageMaps {
    /// Maps of image `index` of a batched output.
    pub fn from_output(out: &NetworkOutput, index: usize) -> Result<Self> {
        let np = softmax_channels(&out.np_logits.narrow(0, index, 1)?)?.squeeze(0)?;
        let nt = softmax_channels(&out.nt_logits.narrow(0, index, 1)?)?.squeeze(0)?;
        let np = to_array3(&np)?;
        Ok(Self {
            np_prob: np.index_axis(ndarray::Axis(0), 1).to_owned(),
            hv: to_array3(&out.hv_map.narrow(0, index, 1)?.squeeze(0)?)?,
            nt_prob: to_array3(&nt)?,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.np_prob.dim()
    }
}

/// Five-tap central difference with reflection padding, identical to the
/// kernel used by the gradient loss. `axis` 1 differentiates along columns.
pub fn central_difference(x: ArrayView2<f32>, axis: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let n = if axis == 1 { w } else { h };
    let reflect = |i: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n as isize - 1);
        let m = i.rem_euclid(period);
        (if m < n as isize { m } else { period - m }) as usize
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let at = |d: isize| {
            if axis == 1 {
                x[[r, reflect(c as isize + d)]]
            } else {
                x[[reflect(r as isize + d), c]]
            }
        };
        (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / 12.0
    })
}

fn min_max_normalize(x: &Array2<f32>) -> Array2<f32> {
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Array2::zeros(x.dim());
    }
    x.mapv(|v| (v - lo) / (hi - lo))
}

/// `max(Sx, Sy)` where `Sx`, `Sy` are the per-image min-max normalized
/// absolute horizontal derivative of channel 0 and vertical derivative of
/// channel 1.
pub fn energy_map(hv: &Array3<f32>) -> Array2<f32> {
    let sx = min_max_normalize(&central_difference(hv.index_axis(ndarray::Axis(0), 0), 1).mapv(f32::abs));
    let sy = min_max_normalize(&central_difference(hv.index_axis(ndarray::Axis(0), 1), 0).mapv(f32::abs));
    ndarray::Zip::from(&sx).and(&sy).map_collect(|&a, &b| a.max(b))
}

pub fn foreground_mask(np_prob: &Array2<f32>, params: &PostprocessParams) -> Array2<bool> {
    let fg = np_prob.mapv(|p| p > params.np_threshold);
    remove_small_components(&fg, params.min_object_px, params.connectivity)
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    energy: f32,
    r: usize,
    c: usize,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed so the max-heap pops the lowest energy, then the earliest pixel.
    fn cmp(&self, other: &Self) -> Ordering {
        other.energy.total_cmp(&self.energy).then(other.r.cmp(&self.r)).then(other.c.cmp(&self.c))
    }
}

/// Marker-controlled priority flood of `energy` restricted to `mask`.
/// Foreground components without a marker become instances of their own,
/// numbered after the markers in scan order.
pub fn watershed(energy: &Array2<f32>, markers: &Array2<u32>, mask: &Array2<bool>, conn: Connectivity) -> Array2<u32> {
    let dim = energy.dim();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut heap = BinaryHeap::new();
    for ((r, c), &m) in markers.indexed_iter() {
        if m > 0 && mask[[r, c]] {
            labels[[r, c]] = m;
            heap.push(Pending { energy: energy[[r, c]], r, c });
        }
    }
    while let Some(p) = heap.pop() {
        let id = labels[[p.r, p.c]];
        for q in neighbours((p.r, p.c), dim, conn) {
            if mask[q] && labels[q] == 0 {
                labels[q] = id;
                heap.push(Pending { energy: energy[q], r: q.0, c: q.1 });
            }
        }
    }
    let mut next = labels.iter().copied().max().unwrap_or(0);
    let orphan = ndarray::Zip::from(mask).and(&labels).map_collect(|&m, &l| m && l == 0);
    let (extra, n) = label_components(&orphan, conn);
    if n > 0 {
        for (l, &e) in labels.iter_mut().zip(extra.iter()) {
            if e > 0 {
                *l = next + e;
            }
        }
        next += n as u32;
    }
    debug_assert!(labels.iter().all(|&l| l <= next));
    labels
}

/// Threshold, energy, markers and watershed; every foreground pixel gets one id.
pub fn instance_segment(maps: &ImageMaps, params: &PostprocessParams) -> InstanceMap {
    let fg = foreground_mask(&maps.np_prob, params);
    if !fg.iter().any(|&v| v) {
        return InstanceMap::new(fg.nrows(), fg.ncols());
    }
    let energy = energy_map(&maps.hv);
    let seeds = ndarray::Zip::from(&fg).and(&energy).map_collect(|&f, &e| f && e <= params.energy_threshold);
    let seeds = remove_small_components(&seeds, params.min_marker_px, params.connectivity);
    let (markers, _) = label_components(&seeds, params.connectivity);
    InstanceMap::from_array(watershed(&energy, &markers, &fg, params.connectivity))
}

fn dilate(mask: &Array2<bool>) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |p| mask[p] || neighbours(p, dim, Connectivity::Eight).any(|q| mask[q]))
}

/// Erosion with out-of-bounds treated as set, so closing never shrinks at the
/// image border.
fn erode(mask: &Array2<bool>) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |p| mask[p] && neighbours(p, dim, Connectivity::Eight).all(|q| mask[q]))
}

/// Pixels of `mask`'s complement not 4-connected to the array border.
fn holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !mask[[r, c]] {
                outside[[r, c]] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some(p) = stack.pop() {
        for q in neighbours(p, (h, w), Connectivity::Four) {
            if !mask[q] && !outside[q] {
                outside[q] = true;
                stack.push(q);
            }
        }
    }
    ndarray::Zip::from(mask).and(&outside).map_collect(|&m, &o| !m && !o)
}

/// One closing + hole-filling sweep over all instances in ascending id order;
/// instances only grow into background. Returns whether anything changed.
fn close_and_fill(labels: &mut Array2<u32>) -> bool {
    let (h, w) = labels.dim();
    let map = InstanceMap::from_array(labels.clone());
    let mut changed = false;
    for (id, region) in map.regions() {
        // Window padded by 2 so the dilation and the hole border stay inside.
        let (r0, c0) = (region.bbox.0.saturating_sub(2), region.bbox.1.saturating_sub(2));
        let (r1, c1) = ((region.bbox.2 + 2).min(h), (region.bbox.3 + 2).min(w));
        let window = labels.slice(ndarray::s![r0..r1, c0..c1]).mapv(|v| v == id);
        let closed = erode(&dilate(&window));
        let filled = {
            let hl = holes(&closed);
            ndarray::Zip::from(&closed).and(&hl).map_collect(|&a, &b| a || b)
        };
        for ((r, c), &want) in filled.indexed_iter() {
            let cell = &mut labels[[r0 + r, c0 + c]];
            if want && *cell == 0 {
                *cell = id;
                changed = true;
            }
        }
    }
    changed
}

fn remove_small(labels: &mut Array2<u32>, min_px: usize) {
    let mut area: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in labels.iter() {
        if v > 0 {
            *area.entry(v).or_default() += 1;
        }
    }
    labels.mapv_inplace(|v| if v > 0 && area[&v] < min_px { 0 } else { v });
}

/// Remove small instances, then close (3x3) and fill holes per instance until
/// stable, then relabel to `1..=N` in id order.
pub fn cleanup(instances: &InstanceMap, params: &PostprocessParams) -> InstanceMap {
    let mut labels = instances.labels().clone();
    remove_small(&mut labels, params.min_object_px);
    for _ in 0..16 {
        if !close_and_fill(&mut labels) {
            break;
        }
    }
    InstanceMap::from_array(labels).relabel_sequential()
}

/// Per instance, the non-background class with the largest summed
/// probability mass (ties to the lower class) and its mean probability.
pub fn assign_types(instances: &InstanceMap, nt_prob: &Array3<f32>) -> Result<Vec<TypedNucleus>> {
    let (c, h, w) = nt_prob.dim();
    if (h, w) != instances.dim() {
        return Err(Error::Shape(format!("type map {:?} vs instances {:?}", (h, w), instances.dim())));
    }
    if c < 2 {
        return Err(Error::Shape("type probabilities need a background and a nucleus class".into()));
    }
    let regions = instances.regions();
    let mut mass: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for ((r, col), &id) in instances.labels().indexed_iter() {
        if id > 0 {
            let m = mass.entry(id).or_insert_with(|| vec![0.0; c]);
            for (k, slot) in m.iter_mut().enumerate() {
                *slot += nt_prob[[k, r, col]] as f64;
            }
        }
    }
    Ok(regions
        .into_values()
        .map(|reg| {
            let m = &mass[&reg.id];
            let mut best = 1;
            for k in 2..c {
                if m[k] > m[best] {
                    best = k;
                }
            }
            TypedNucleus {
                id: reg.id,
                class_id: best as u8,
                class_prob: (m[best] / reg.area as f64) as f32,
                centroid: reg.centroid,
                bbox: reg.bbox,
                area_px: reg.area,
            }
        })
        .collect())
}

/// Segment, clean up, then type one image's maps.
pub fn postprocess(maps: &ImageMaps, params: &PostprocessParams) -> Result<(InstanceMap, Vec<TypedNucleus>)> {
    let inst = cleanup(&instance_segment(maps, params), params);
    let nuclei = assign_types(&inst, &maps.nt_prob)?;
    Ok((inst, nuclei))
}

/// Per-pixel class map painted from typed nuclei.
pub fn type_map(instances: &InstanceMap, nuclei: &[TypedNucleus]) -> Array2<u8> {
    let lut: BTreeMap<u32, u8> = nuclei.iter().map(|n| (n.id, n.class_id)).collect();
    instances.labels().mapv(|v| if v == 0 { 0 } else { lut.get(&v).copied().unwrap_or(0) })
}

pub fn write_detections(path: &Path, nuclei: &[TypedNucleus]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for n in nuclei {
        serde_json::to_writer(&mut out, n)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<TypedNucleus>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
