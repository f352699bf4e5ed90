use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use ndarray::{s, Array2, Array3};

use crate::data::{image_tensor, Normalization};
use crate::instance::InstanceMap;
use crate::network::Network;
use crate::postprocess::{postprocess, ImageMaps, PostprocessParams, TypedNucleus};
use crate::{Error, Result};

/// Tiles forwarded together.
const TILE_BATCH: usize = 4;

/// Row-major tile origins over an image. Each tile owns a core region; the
/// cores partition the image, with interior boundaries at the middle of each
/// overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile_size: usize,
    pub overlap_px: usize,
    pub origins: Vec<(usize, usize)>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o.min(len - tile));
        if o + tile >= len {
            break;
        }
        o += stride;
    }
    out.dedup();
    out
}

/// `[start, end)` of the core of tile `i` along one axis.
fn axis_core(origins: &[usize], i: usize, tile: usize, len: usize) -> (usize, usize) {
    let cut = |j: usize| (origins[j + 1] + origins[j] + tile) / 2;
    let start = if i == 0 { 0 } else { cut(i - 1) };
    let end = if i + 1 == origins.len() { len } else { cut(i) };
    (start, end)
}

pub fn plan_tiles(height: usize, width: usize, tile_size: usize, overlap_px: usize) -> Result<TileGrid> {
    if tile_size == 0 || tile_size % 32 != 0 {
        return Err(Error::Config(format!("tile size {tile_size} must be a positive multiple of 32")));
    }
    if overlap_px >= tile_size {
        return Err(Error::Config(format!("overlap {overlap_px} must be smaller than the tile size {tile_size}")));
    }
    if tile_size > height || tile_size > width {
        return Err(Error::Config(format!("tile size {tile_size} exceeds the {height}x{width} image")));
    }
    let stride = tile_size - overlap_px;
    let rows = axis_origins(height, tile_size, stride);
    let cols = axis_origins(width, tile_size, stride);
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TileGrid { height, width, tile_size, overlap_px, origins, rows, cols })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Core region `(r0, r1, c0, c1)` of tile `index`, exclusive ends.
    pub fn core(&self, index: usize) -> (usize, usize, usize, usize) {
        let (ri, ci) = (index / self.cols.len(), index % self.cols.len());
        let (r0, r1) = axis_core(&self.rows, ri, self.tile_size, self.height);
        let (c0, c1) = axis_core(&self.cols, ci, self.tile_size, self.width);
        (r0, r1, c0, c1)
    }

    /// Distance from `point` to the nearest edge of tile `index` that lies
    /// inside the image; infinite when the tile spans the whole image.
    pub fn boundary_distance(&self, index: usize, point: (f64, f64)) -> f64 {
        let (r, c) = self.origins[index];
        let t = self.tile_size;
        let mut d = f64::INFINITY;
        if r > 0 {
            d = d.min(point.0 - r as f64);
        }
        if r + t < self.height {
            d = d.min((r + t) as f64 - 1.0 - point.0);
        }
        if c > 0 {
            d = d.min(point.1 - c as f64);
        }
        if c + t < self.width {
            d = d.min((c + t) as f64 - 1.0 - point.1);
        }
        d
    }
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Mirror-pads the bottom and right so both sides are multiples of 32.
fn pad_to_32(rgb: &Array3<u8>) -> Array3<u8> {
    let (c, h, w) = rgb.dim();
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    if (ph, pw) == (h, w) {
        return rgb.clone();
    }
    Array3::from_shape_fn((c, ph, pw), |(k, r, col)| rgb[[k, mirror(r, h), mirror(col, w)]])
}

fn crop_maps(maps: ImageMaps, h: usize, w: usize) -> ImageMaps {
    if maps.dim() == (h, w) {
        return maps;
    }
    ImageMaps {
        np_prob: maps.np_prob.slice(s![..h, ..w]).to_owned(),
        hv: maps.hv.slice(s![.., ..h, ..w]).to_owned(),
        nt_prob: maps.nt_prob.slice(s![.., ..h, ..w]).to_owned(),
    }
}

fn predict_batch(network: &Network, images: &[Array3<u8>], norm: &Normalization) -> Result<Vec<ImageMaps>> {
    let padded: Vec<Array3<u8>> = images.iter().map(pad_to_32).collect();
    let xs = padded.iter().map(|im| image_tensor(im, norm, &Device::Cpu)).collect::<Result<Vec<_>>>()?;
    let out = network.forward_t(&Tensor::stack(&xs, 0)?, false)?;
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let (_, h, w) = im.dim();
            Ok(crop_maps(ImageMaps::from_output(&out, i)?, h, w))
        })
        .collect()
}

/// Evaluation-mode maps of one `[3, H, W]` image of any size.
pub fn predict_maps(network: &Network, rgb: &Array3<u8>, norm: &Normalization) -> Result<ImageMaps> {
    Ok(predict_batch(network, std::slice::from_ref(rgb), norm)?.remove(0))
}

/// Whole-image inference in one forward pass.
pub fn infer_direct(
    network: &Network,
    rgb: &Array3<u8>,
    norm: &Normalization,
    params: &PostprocessParams,
) -> Result<(InstanceMap, Vec<TypedNucleus>)> {
    postprocess(&predict_maps(network, rgb, norm)?, params)
}

/// Post-processed output of one tile in tile-local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePrediction {
    pub instances: InstanceMap,
    pub nuclei: Vec<TypedNucleus>,
}

/// Per-tile inference followed by [`stitch`].
pub fn infer_tiled(
    network: &Network,
    rgb: &Array3<u8>,
    grid: &TileGrid,
    norm: &Normalization,
    params: &PostprocessParams,
) -> Result<(InstanceMap, Vec<TypedNucleus>)> {
    let (_, h, w) = rgb.dim();
    if (grid.height, grid.width) != (h, w) {
        return Err(Error::Shape(format!("grid planned for {}x{}, image is {h}x{w}", grid.height, grid.width)));
    }
    if grid.tile_size % 32 != 0 {
        return Err(Error::Shape(format!("tile size {} is not a multiple of 32", grid.tile_size)));
    }
    if !network.is_reparameterized() {
        log::warn!("tiled inference with a branch-form encoder; reparameterize for speed");
    }
    let t = grid.tile_size;
    let mut tiles = Vec::with_capacity(grid.len());
    for chunk in grid.origins.chunks(TILE_BATCH) {
        let crops: Vec<Array3<u8>> = chunk.iter().map(|&(r, c)| rgb.slice(s![.., r..r + t, c..c + t]).to_owned()).collect();
        for maps in predict_batch(network, &crops, norm)? {
            let (instances, nuclei) = postprocess(&maps, params)?;
            tiles.push(TilePrediction { instances, nuclei });
        }
    }
    stitch(grid, &tiles)
}

struct Candidate {
    tile: usize,
    local: u32,
    pixels: Vec<(usize, usize)>,
    dist: f64,
    class_id: u8,
    class_prob: f32,
}

/// Merges per-tile instances into one map. A tile owns the instances that
/// touch its core. Owned instances are placed in order of decreasing
/// distance from their tile boundary; one whose IoU with an already placed
/// instance exceeds 0.5 is a duplicate and dropped, otherwise it claims the
/// pixels still free. Final ids follow (tile, local id) order.
pub fn stitch(grid: &TileGrid, tiles: &[TilePrediction]) -> Result<(InstanceMap, Vec<TypedNucleus>)> {
    if tiles.len() != grid.len() {
        return Err(Error::Shape(format!("{} tile predictions for a {}-tile grid", tiles.len(), grid.len())));
    }
    let mut cands = Vec::new();
    for (ti, tile) in tiles.iter().enumerate() {
        if tile.instances.dim() != (grid.tile_size, grid.tile_size) {
            return Err(Error::Shape(format!("tile {ti} has shape {:?}", tile.instances.dim())));
        }
        let (or, oc) = grid.origins[ti];
        let (r0, r1, c0, c1) = grid.core(ti);
        let classes: BTreeMap<u32, (u8, f32)> = tile.nuclei.iter().map(|n| (n.id, (n.class_id, n.class_prob))).collect();
        for (local, px) in tile.instances.pixel_lists() {
            let pixels: Vec<(usize, usize)> = px.into_iter().map(|(r, c)| (r + or, c + oc)).collect();
            if !pixels.iter().any(|&(r, c)| (r0..r1).contains(&r) && (c0..c1).contains(&c)) {
                continue;
            }
            let n = pixels.len() as f64;
            let centroid = (
                pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            );
            let (class_id, class_prob) = classes.get(&local).copied().unwrap_or((0, 0.0));
            cands.push(Candidate { tile: ti, local, dist: grid.boundary_distance(ti, centroid), pixels, class_id, class_prob });
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        y.dist.total_cmp(&x.dist).then(x.tile.cmp(&y.tile)).then(x.local.cmp(&y.local))
    });
    let mut labels = Array2::<u32>::zeros((grid.height, grid.width));
    let mut area: BTreeMap<u32, usize> = BTreeMap::new();
    for ci in order {
        let cand = &cands[ci];
        let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
        for &p in &cand.pixels {
            if labels[p] != 0 {
                *inter.entry(labels[p]).or_default() += 1;
            }
        }
        let duplicate = inter.iter().any(|(l, &i)| i as f64 / (area[l] + cand.pixels.len() - i) as f64 > 0.5);
        if duplicate {
            continue;
        }
        let label = ci as u32 + 1;
        let mut painted = 0;
        for &p in &cand.pixels {
            if labels[p] == 0 {
                labels[p] = label;
                painted += 1;
            }
        }
        if painted > 0 {
            area.insert(label, painted);
        }
    }
    // Placed labels are candidate indices + 1, and candidates were collected
    // in (tile, local id) order, so sequential relabelling keeps that order.
    let placed: Vec<usize> = area.keys().map(|&l| l as usize - 1).collect();
    let instances = InstanceMap::from_array(labels).relabel_sequential();
    let nuclei = instances
        .regions()
        .into_values()
        .zip(placed)
        .map(|(reg, ci)| TypedNucleus {
            id: reg.id,
            class_id: cands[ci].class_id,
            class_prob: cands[ci].class_prob,
            centroid: reg.centroid,
            bbox: reg.bbox,
            area_px: reg.area,
        })
        .collect();
    Ok((instances, nuclei))
}
