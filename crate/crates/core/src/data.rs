//! Annotated images, training-target synthesis, dataset I/O, augmentation,
//! class alignment and balanced sampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use ndarray::{s, Array2, Array3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::instance::{Connectivity, InstanceMap};
use crate::losses::TargetBatch;
use crate::{Error, Result};

pub const PANNUKE_CLASS_NAMES: [&str; 6] =
    ["Background", "Neoplastic", "Inflammatory", "Connective", "Dead", "Epithelial"];

pub const PANNUKE_TISSUES: [&str; 19] = [
    "Adrenal_gland",
    "Bile-duct",
    "Bladder",
    "Breast",
    "Cervix",
    "Colon",
    "Esophagus",
    "HeadNeck",
    "Kidney",
    "Liver",
    "Lung",
    "Ovarian",
    "Pancreatic",
    "Prostate",
    "Skin",
    "Stomach",
    "Testis",
    "Thyroid",
    "Uterus",
];

/// Class index of dead nuclei in the PanNuke label set.
pub const PANNUKE_DEAD: u8 = 4;

/// One image with its instance, type and tissue annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    /// `[3, H, W]`
    pub rgb: Array3<u8>,
    pub instances: InstanceMap,
    /// `[H, W]`, 0 exactly where `instances` is 0.
    pub types: Array2<u8>,
    pub tissue: u32,
    pub fold: u32,
}

impl AnnotatedImage {
    pub fn new(
        id: impl Into<String>,
        rgb: Array3<u8>,
        instances: InstanceMap,
        types: Array2<u8>,
        tissue: u32,
        fold: u32,
    ) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = rgb.dim();
        if c != 3 || instances.dim() != (h, w) || types.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "{id}: rgb {:?}, instances {:?}, types {:?} disagree",
                rgb.dim(),
                instances.dim(),
                types.dim()
            )));
        }
        Ok(Self { id, rgb, instances, types, tissue, fold })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.instances.dim()
    }

    /// Enforce the instance/type invariants: background pixels get type 0,
    /// every instance takes its majority nonzero type (ties toward the lower
    /// class) and instances without any typed pixel are dropped. Returns the
    /// number of pixels changed.
    pub fn repair_types(&mut self) -> usize {
        let mut votes: BTreeMap<u32, BTreeMap<u8, usize>> = BTreeMap::new();
        for (&id, &t) in self.instances.labels().iter().zip(self.types.iter()) {
            if id > 0 {
                let v = votes.entry(id).or_default();
                if t > 0 {
                    *v.entry(t).or_default() += 1;
                }
            }
        }
        let winner: BTreeMap<u32, u8> = votes
            .into_iter()
            .map(|(id, v)| {
                // max_by_key keeps the last maximum, so iterate classes in reverse.
                let best = v.iter().rev().max_by_key(|(_, &n)| n).map(|(&t, _)| t).unwrap_or(0);
                (id, best)
            })
            .collect();
        let mut changed = 0;
        let labels = self.instances.labels_mut();
        for (id, t) in labels.iter_mut().zip(self.types.iter_mut()) {
            let want = if *id == 0 { 0 } else { winner[id] };
            if want == 0 && *id > 0 {
                *id = 0;
            }
            if *t != want {
                *t = want;
                changed += 1;
            }
        }
        changed
    }

    /// True when the instance/type invariants hold.
    pub fn is_consistent(&self) -> bool {
        let mut seen: BTreeMap<u32, u8> = BTreeMap::new();
        for (&id, &t) in self.instances.labels().iter().zip(self.types.iter()) {
            if (id == 0) != (t == 0) {
                return false;
            }
            if id > 0 && *seen.entry(id).or_insert(t) != t {
                return false;
            }
        }
        true
    }

    /// Number of instances of each class `0..num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        let mut seen = BTreeMap::new();
        for (&id, &t) in self.instances.labels().iter().zip(self.types.iter()) {
            if id > 0 && seen.insert(id, t).is_none() && (t as usize) < num_classes {
                counts[t as usize] += 1;
            }
        }
        counts
    }
}

/// Per-image training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTargets {
    /// `[H, W]` 1 on nuclei.
    pub np: Array2<f32>,
    /// `[2, H, W]` horizontal then vertical, 0 outside nuclei.
    pub hv: Array3<f32>,
    /// `[H, W]` class indices.
    pub nt: Array2<u32>,
    pub tissue: u32,
}

/// Per-instance centroid-relative coordinates scaled so that the leftmost
/// (topmost) pixel of each instance maps to -1 and the rightmost
/// (bottommost) to +1. Negative and positive sides are scaled separately.
pub fn make_hv_target(instances: &InstanceMap) -> Array3<f32> {
    let (h, w) = instances.dim();
    let mut hv = Array3::<f32>::zeros((2, h, w));
    for pixels in instances.pixel_lists().values() {
        let n = pixels.len() as f64;
        let cr = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cc = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        for (ch, centre, pick) in [(0usize, cc, 1usize), (1, cr, 0)] {
            let coord = |p: &(usize, usize)| if pick == 1 { p.1 as f64 } else { p.0 as f64 } - centre;
            let lo = pixels.iter().map(coord).fold(0.0f64, f64::min);
            let hi = pixels.iter().map(coord).fold(0.0f64, f64::max);
            for p in pixels {
                let d = coord(p);
                let v = if d < 0.0 {
                    d / -lo
                } else if d > 0.0 {
                    d / hi
                } else {
                    0.0
                };
                hv[[ch, p.0, p.1]] = v as f32;
            }
        }
    }
    hv
}

pub fn make_targets(img: &AnnotatedImage) -> TrainingTargets {
    TrainingTargets {
        np: img.instances.labels().mapv(|v| (v > 0) as u8 as f32),
        hv: make_hv_target(&img.instances),
        nt: img.types.mapv(u32::from),
        tissue: img.tissue,
    }
}

/// Per-channel input normalization applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.5; 3], std: [0.5; 3] }
    }
}

/// `[3, H, W]` bytes to a normalized `[3, H, W]` f32 tensor.
pub fn image_tensor(rgb: &Array3<u8>, norm: &Normalization, device: &Device) -> Result<Tensor> {
    let (c, h, w) = rgb.dim();
    let mut v = Vec::with_capacity(c * h * w);
    for (ch, plane) in rgb.axis_iter(Axis(0)).enumerate() {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        v.extend(plane.iter().map(|&x| (x as f32 / 255.0 - m) / s));
    }
    Ok(Tensor::from_vec(v, (c, h, w), device)?)
}

/// Stack images into a `[B, 3, H, W]` input and the matching targets.
pub fn stack_batch(images: &[&AnnotatedImage], norm: &Normalization, device: &Device) -> Result<(Tensor, TargetBatch)> {
    if images.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut xs = Vec::new();
    let (mut np, mut hv, mut nt, mut tissue) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for img in images {
        let (h, w) = img.dim();
        let t = make_targets(img);
        xs.push(image_tensor(&img.rgb, norm, device)?);
        np.push(Tensor::from_iter(t.np.iter().copied(), device)?.reshape((h, w))?);
        hv.push(Tensor::from_iter(t.hv.iter().copied(), device)?.reshape((2, h, w))?);
        nt.push(Tensor::from_iter(t.nt.iter().copied(), device)?.reshape((h, w))?);
        tissue.push(t.tissue);
    }
    let batch = TargetBatch {
        np: Tensor::stack(&np, 0)?,
        hv: Tensor::stack(&hv, 0)?,
        nt: Tensor::stack(&nt, 0)?,
        tissue: Tensor::new(tissue, device)?,
    };
    Ok((Tensor::stack(&xs, 0)?, batch))
}

// Dataset directory layout.

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub tissue_label: u32,
    pub fold: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let hwc = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
}

pub fn write_rgb(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (_, h, w) = rgb.dim();
    let raw: Vec<u8> = rgb.view().permuted_axes([1, 2, 0]).iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("rgb buffer".into()))?;
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_types(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_types(path: &Path, types: &Array2<u8>) -> Result<()> {
    let (h, w) = types.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, types.iter().copied().collect())
        .ok_or_else(|| Error::Shape("type buffer".into()))?;
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Load a dataset directory (`images/<id>.png`, `labels/<id>_inst.png`,
/// `labels/<id>_type.png`, `manifest.tsv`), optionally restricted to one
/// fold. Instance/type inconsistencies are repaired and logged.
pub fn load_pannuke(
    root: &Path,
    fold: Option<u32>,
    num_classes: usize,
    num_tissues: usize,
) -> Result<Vec<AnnotatedImage>> {
    let manifest = root.join("manifest.tsv");
    if !manifest.exists() {
        let empty = fs::read_dir(root).map_err(io_err(root))?.next().is_none();
        if empty {
            log::warn!("{}: empty dataset directory", root.display());
            return Ok(Vec::new());
        }
        return Err(Error::Dataset(format!("{}: missing manifest.tsv", root.display())));
    }
    let mut out = Vec::new();
    for entry in read_manifest(&manifest)? {
        if fold.is_some_and(|f| f != entry.fold) {
            continue;
        }
        if entry.tissue_label as usize >= num_tissues {
            return Err(Error::Dataset(format!(
                "{}: tissue label {} >= {num_tissues}",
                entry.id, entry.tissue_label
            )));
        }
        let rgb = read_rgb(&root.join("images").join(format!("{}.png", entry.id)))?;
        let instances = InstanceMap::read_png(&root.join("labels").join(format!("{}_inst.png", entry.id)))?;
        let types = read_types(&root.join("labels").join(format!("{}_type.png", entry.id)))?;
        if let Some(&bad) = types.iter().find(|&&t| t as usize >= num_classes) {
            return Err(Error::Dataset(format!("{}: type value {bad} >= {num_classes}", entry.id)));
        }
        let mut img = AnnotatedImage::new(entry.id, rgb, instances, types, entry.tissue_label, entry.fold)?;
        let changed = img.repair_types();
        if changed > 0 {
            log::warn!("{}: repaired {changed} inconsistent type pixels", img.id);
        }
        out.push(img);
    }
    Ok(out)
}

/// Write images in the dataset directory layout read by [`load_pannuke`].
pub fn save_dataset(root: &Path, images: &[AnnotatedImage]) -> Result<()> {
    let (img_dir, lbl_dir) = (root.join("images"), root.join("labels"));
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    fs::create_dir_all(&lbl_dir).map_err(io_err(&lbl_dir))?;
    let manifest = root.join("manifest.tsv");
    let mut writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&manifest)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest.display())))?;
    for img in images {
        write_rgb(&img_dir.join(format!("{}.png", img.id)), &img.rgb)?;
        img.instances.write_png(&lbl_dir.join(format!("{}_inst.png", img.id)))?;
        write_types(&lbl_dir.join(format!("{}_type.png", img.id)), &img.types)?;
        writer
            .serialize(ManifestEntry { id: img.id.clone(), tissue_label: img.tissue, fold: img.fold })
            .map_err(|e| Error::Dataset(e.to_string()))?;
    }
    writer.flush().map_err(io_err(&manifest))
}

// PanNuke array-container conversion.

/// Paths of one PanNuke fold's `images.npy`, `masks.npy` and `types.npy`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PannukeArrays {
    pub images: PathBuf,
    pub masks: PathBuf,
    pub types: PathBuf,
}

impl PannukeArrays {
    /// Search `dir` recursively for the three array files.
    pub fn find(dir: &Path) -> Result<Self> {
        let mut found: BTreeMap<&str, PathBuf> = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(io_err(&d))? {
                let path = entry.map_err(io_err(&d))?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                for name in ["images.npy", "masks.npy", "types.npy"] {
                    if path.file_name().is_some_and(|f| f == name) {
                        found.entry(name).or_insert(path.clone());
                    }
                }
            }
        }
        let mut take = |name: &str| {
            found
                .remove(name)
                .ok_or_else(|| Error::Dataset(format!("{}: no {name} found", dir.display())))
        };
        Ok(Self { images: take("images.npy")?, masks: take("masks.npy")?, types: take("types.npy")? })
    }
}

fn open_npy(path: &Path) -> Result<npyz::NpyFile<BufReader<fs::File>>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    npyz::NpyFile::new(BufReader::new(file)).map_err(io_err(path))
}

/// Stream an npy array of any real dtype as f64 values.
fn npy_values(path: &Path) -> Result<(Vec<u64>, Box<dyn Iterator<Item = Result<f64>>>)> {
    let npy = open_npy(path)?;
    let shape = npy.shape().to_vec();
    let type_str = match npy.dtype() {
        npyz::DType::Plain(ts) => ts.to_string(),
        other => return Err(Error::Dataset(format!("{}: unsupported dtype {other:?}", path.display()))),
    };
    let p = path.to_path_buf();
    macro_rules! stream {
        ($t:ty) => {{
            let it = npy.data::<$t>().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            Box::new(it.map(move |v| v.map(|x| x as f64).map_err(|e| Error::io(&p, e))))
                as Box<dyn Iterator<Item = Result<f64>>>
        }};
    }
    let it = match &type_str[1..] {
        "f8" => stream!(f64),
        "f4" => stream!(f32),
        "u1" => stream!(u8),
        "i4" => stream!(i32),
        "i8" => stream!(i64),
        "u2" => stream!(u16),
        other => return Err(Error::Dataset(format!("{}: unsupported dtype {other}", path.display()))),
    };
    Ok((shape, it))
}

fn npy_strings(path: &Path) -> Result<Vec<String>> {
    let npy = open_npy(path)?;
    npy.into_vec::<String>()
        .map_err(|e| Error::Dataset(format!("{}: expected a fixed-width unicode array: {e}", path.display())))
}

pub fn tissue_index(name: &str) -> Result<u32> {
    let norm = |s: &str| s.to_ascii_lowercase().replace(['-', '_', ' '], "");
    PANNUKE_TISSUES
        .iter()
        .position(|t| norm(t) == norm(name))
        .map(|i| i as u32)
        .ok_or_else(|| Error::Dataset(format!("unknown PanNuke tissue `{name}`")))
}

/// Convert one PanNuke fold into the dataset layout; returns the image count.
/// Mask channels 0..5 hold per-class instance ids in the order neoplastic,
/// inflammatory, connective, dead, epithelial; class index = channel + 1.
pub fn convert_pannuke(arrays: &PannukeArrays, out_root: &Path, fold: u32) -> Result<usize> {
    let tissues = npy_strings(&arrays.types)?;
    let (ishape, mut ivals) = npy_values(&arrays.images)?;
    let (mshape, mut mvals) = npy_values(&arrays.masks)?;
    let n = tissues.len();
    if ishape.len() != 4 || ishape[3] != 3 || ishape[0] as usize != n {
        return Err(Error::Dataset(format!("images.npy shape {ishape:?} for {n} tissue labels")));
    }
    if mshape.len() != 4 || mshape[..3] != ishape[..3] || mshape[3] < 5 {
        return Err(Error::Dataset(format!("masks.npy shape {mshape:?} vs images {ishape:?}")));
    }
    let (h, w, mc) = (ishape[1] as usize, ishape[2] as usize, mshape[3] as usize);
    let mut images = Vec::with_capacity(n);
    for (i, tissue) in tissues.iter().enumerate() {
        let mut rgb = Array3::<u8>::zeros((3, h, w));
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let v = ivals.next().ok_or_else(|| Error::Dataset("images.npy truncated".into()))??;
                    rgb[[ch, r, c]] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let mut keys: BTreeMap<(usize, u64), u32> = BTreeMap::new();
        let mut labels = Array2::<u32>::zeros((h, w));
        let mut types = Array2::<u8>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut px = Vec::with_capacity(mc);
                for _ in 0..mc {
                    px.push(mvals.next().ok_or_else(|| Error::Dataset("masks.npy truncated".into()))??);
                }
                if let Some(ch) = (0..5).find(|&ch| px[ch] > 0.0) {
                    let next = keys.len() as u32 + 1;
                    labels[[r, c]] = *keys.entry((ch, px[ch] as u64)).or_insert(next);
                    types[[r, c]] = ch as u8 + 1;
                }
            }
        }
        let id = format!("fold{fold}_{i:05}");
        let mut img =
            AnnotatedImage::new(id, rgb, InstanceMap::from_array(labels), types, tissue_index(tissue)?, fold)?;
        img.repair_types();
        images.push(img);
    }
    save_dataset(out_root, &images)?;
    Ok(n)
}

// External dataset class alignment.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExternalDataset {
    CoNSeP,
    GlySAC,
}

impl FromStr for ExternalDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "consep" => Ok(Self::CoNSeP),
            "glysac" => Ok(Self::GlySAC),
            other => Err(Error::Config(format!("unknown external dataset `{other}`"))),
        }
    }
}

impl ExternalDataset {
    /// Names of the aligned label set, background first.
    pub fn aligned_names(self) -> &'static [&'static str] {
        match self {
            Self::CoNSeP => &["Background", "Neoplastic", "Inflammatory", "Epithelial", "Miscellaneous"],
            Self::GlySAC => &["Background", "Epithelial", "Inflammatory", "Miscellaneous"],
        }
    }

    /// Names of the source dataset's raw labels, indexed by label value.
    pub fn source_names(self) -> &'static [&'static str] {
        match self {
            Self::CoNSeP => &[
                "background",
                "other",
                "inflammatory",
                "healthy epithelial",
                "dysplastic/malignant epithelial",
                "fibroblast",
                "muscle",
                "endothelial",
            ],
            Self::GlySAC => &["background", "miscellaneous", "lymphocyte", "epithelial"],
        }
    }

    /// Aligned index of a raw source label.
    pub fn align_source(self, label: u8) -> Result<u8> {
        let mapped = match (self, label) {
            (_, 0) => 0,
            (Self::CoNSeP, 4) => 1,
            (Self::CoNSeP, 2) => 2,
            (Self::CoNSeP, 3) => 3,
            (Self::CoNSeP, 1 | 5 | 6 | 7) => 4,
            (Self::GlySAC, 3) => 1,
            (Self::GlySAC, 2) => 2,
            (Self::GlySAC, 1) => 3,
            (ds, other) => return Err(Error::Dataset(format!("unknown {ds:?} label {other}"))),
        };
        Ok(mapped)
    }

    /// Aligned index of a PanNuke class prediction.
    pub fn align_pannuke(self, class: u8) -> Result<u8> {
        let mapped = match (self, class) {
            (_, 0) => 0,
            (Self::CoNSeP, 1) => 1,
            (Self::CoNSeP, 2) => 2,
            (Self::CoNSeP, 5) => 3,
            (Self::CoNSeP, 3 | 4) => 4,
            (Self::GlySAC, 1 | 5) => 1,
            (Self::GlySAC, 2) => 2,
            (Self::GlySAC, 3 | 4) => 3,
            (_, other) => return Err(Error::Dataset(format!("PanNuke class {other} out of range"))),
        };
        Ok(mapped)
    }
}

/// Map a raw source type map onto the aligned label set.
pub fn align_classes(dataset: ExternalDataset, types: &Array2<u8>) -> Result<Array2<u8>> {
    let mut out = Array2::zeros(types.dim());
    for (o, &t) in out.iter_mut().zip(types.iter()) {
        *o = dataset.align_source(t)?;
    }
    Ok(out)
}

/// Bilinear image resize with nearest-neighbour label resize.
pub fn resize_annotated(img: &AnnotatedImage, height: usize, width: usize) -> Result<AnnotatedImage> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img.rgb.view().permuted_axes([1, 2, 0]).iter().copied().collect();
    let src = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("rgb buffer".into()))?;
    let dst = image::imageops::resize(&src, width as u32, height as u32, image::imageops::FilterType::Triangle);
    let rgb = Array3::from_shape_vec((height, width, 3), dst.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))?
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .to_owned();
    let near = |i: usize, n_out: usize, n_in: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut labels = Array2::zeros((height, width));
    let mut types = Array2::zeros((height, width));
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = (near(r, height, h), near(c, width, w));
            labels[[r, c]] = img.instances.get(sr, sc);
            types[[r, c]] = img.types[[sr, sc]];
        }
    }
    AnnotatedImage::new(img.id.clone(), rgb, InstanceMap::from_array(labels), types, img.tissue, img.fold)
}

// Augmentation.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Probability of a random multiple-of-90-degree rotation.
    pub rot90_p: f64,
    /// Probability of a free rotation in `[-max_rotation_deg, max_rotation_deg]`.
    pub rotate_p: f64,
    pub max_rotation_deg: f64,
    pub elastic_p: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub blur_p: f64,
    /// Largest odd Gaussian kernel size.
    pub blur_max_kernel: usize,
    pub noise_p: f64,
    pub noise_sigma: f64,
    pub jitter_p: f64,
    /// Relative brightness, contrast and saturation range.
    pub jitter: f64,
    pub superpixel_p: f64,
    /// Side of the square cells averaged by the superpixel transform.
    pub superpixel_cell: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            rot90_p: 0.5,
            rotate_p: 0.25,
            max_rotation_deg: 180.0,
            elastic_p: 0.2,
            elastic_alpha: 30.0,
            elastic_sigma: 5.0,
            blur_p: 0.2,
            blur_max_kernel: 5,
            noise_p: 0.2,
            noise_sigma: 0.05,
            jitter_p: 0.5,
            jitter: 0.1,
            superpixel_p: 0.1,
            superpixel_cell: 8,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            rot90_p: 0.0,
            rotate_p: 0.0,
            elastic_p: 0.0,
            blur_p: 0.0,
            noise_p: 0.0,
            jitter_p: 0.0,
            superpixel_p: 0.0,
            ..Self::default()
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Resample with reflection padding: bilinear for RGB, nearest for labels.
/// `src(r, c)` gives the source coordinate of output pixel `(r, c)`.
fn warp(img: &AnnotatedImage, src: impl Fn(usize, usize) -> (f64, f64)) -> AnnotatedImage {
    let (h, w) = img.dim();
    let mut rgb = Array3::<u8>::zeros((3, h, w));
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut types = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = src(r, c);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let taps = [
                (reflect(r0, h), reflect(c0, w), (1.0 - fr) * (1.0 - fc)),
                (reflect(r0, h), reflect(c0 + 1, w), (1.0 - fr) * fc),
                (reflect(r0 + 1, h), reflect(c0, w), fr * (1.0 - fc)),
                (reflect(r0 + 1, h), reflect(c0 + 1, w), fr * fc),
            ];
            for ch in 0..3 {
                let v: f64 = taps.iter().map(|&(y, x, k)| k * img.rgb[[ch, y, x]] as f64).sum();
                rgb[[ch, r, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
            let (nr, nc) = (reflect(sr.round() as isize, h), reflect(sc.round() as isize, w));
            labels[[r, c]] = img.instances.get(nr, nc);
            types[[r, c]] = img.types[[nr, nc]];
        }
    }
    let mut out = img.clone();
    out.rgb = rgb;
    out.types = types;
    out.instances = split_fragments(&InstanceMap::from_array(labels));
    out
}

/// Give every connected fragment of every instance its own id, numbered in
/// row-major order of first appearance.
pub fn split_fragments(map: &InstanceMap) -> InstanceMap {
    let (h, w) = map.dim();
    let mut out = Array2::<u32>::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let id = map.get(r, c);
            if id == 0 || out[[r, c]] != 0 {
                continue;
            }
            next += 1;
            out[[r, c]] = next;
            stack.push((r, c));
            while let Some(p) = stack.pop() {
                for q in crate::instance::neighbours(p, (h, w), Connectivity::Eight) {
                    if map.labels()[q] == id && out[q] == 0 {
                        out[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    InstanceMap::from_array(out)
}

fn flip_horizontal(img: &AnnotatedImage) -> AnnotatedImage {
    let mut out = img.clone();
    out.rgb = img.rgb.slice(s![.., .., ..;-1]).to_owned();
    out.types = img.types.slice(s![.., ..;-1]).to_owned();
    out.instances = InstanceMap::from_array(img.instances.labels().slice(s![.., ..;-1]).to_owned());
    out
}

fn flip_vertical(img: &AnnotatedImage) -> AnnotatedImage {
    let mut out = img.clone();
    out.rgb = img.rgb.slice(s![.., ..;-1, ..]).to_owned();
    out.types = img.types.slice(s![..;-1, ..]).to_owned();
    out.instances = InstanceMap::from_array(img.instances.labels().slice(s![..;-1, ..]).to_owned());
    out
}

/// Rotate by 90 degrees counter-clockwise (transpose then vertical flip).
pub fn rotate90(img: &AnnotatedImage) -> AnnotatedImage {
    let t = |a: &Array2<u8>| a.t().slice(s![..;-1, ..]).to_owned();
    let mut out = img.clone();
    out.rgb = img.rgb.view().permuted_axes([0, 2, 1]).slice(s![.., ..;-1, ..]).to_owned();
    out.types = t(&img.types);
    out.instances = InstanceMap::from_array(img.instances.labels().t().slice(s![..;-1, ..]).to_owned());
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian smoothing with reflection padding.
fn smooth(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let (h, w) = field.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            tmp[[r, c]] = k.iter().enumerate().map(|(i, kv)| kv * field[[r, reflect(c as isize + i as isize - rad, w)]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = k.iter().enumerate().map(|(i, kv)| kv * tmp[[reflect(r as isize + i as isize - rad, h), c]]).sum();
        }
    }
    out
}

fn to_float(rgb: &Array3<u8>) -> Array3<f64> {
    rgb.mapv(|v| v as f64 / 255.0)
}

fn to_bytes(x: &Array3<f64>) -> Array3<u8> {
    x.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn gaussian_blur(x: &Array3<f64>, kernel: usize) -> Array3<f64> {
    let sigma = 0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let mut out = x.clone();
    for (ch, plane) in x.axis_iter(Axis(0)).enumerate() {
        let sm = smooth(&plane.to_owned(), sigma);
        out.index_axis_mut(Axis(0), ch).assign(&sm);
    }
    out
}

fn color_jitter(x: &mut Array3<f64>, brightness: f64, contrast: f64, saturation: f64) {
    let (_, h, w) = x.dim();
    x.mapv_inplace(|v| v * brightness);
    let gray_of = |x: &Array3<f64>, r: usize, c: usize| 0.299 * x[[0, r, c]] + 0.587 * x[[1, r, c]] + 0.114 * x[[2, r, c]];
    let mean_gray = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| gray_of(x, r, c)).sum::<f64>()
        / (h * w).max(1) as f64;
    x.mapv_inplace(|v| (v - mean_gray) * contrast + mean_gray);
    for r in 0..h {
        for c in 0..w {
            let g = gray_of(x, r, c);
            for ch in 0..3 {
                x[[ch, r, c]] = g + (x[[ch, r, c]] - g) * saturation;
            }
        }
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Replace roughly half of the `cell x cell` blocks by their mean colour.
fn superpixels(x: &mut Array3<f64>, cell: usize, rng: &mut impl Rng) {
    let (_, h, w) = x.dim();
    let cell = cell.max(1);
    for r0 in (0..h).step_by(cell) {
        for c0 in (0..w).step_by(cell) {
            if !rng.random_bool(0.5) {
                continue;
            }
            let (r1, c1) = ((r0 + cell).min(h), (c0 + cell).min(w));
            for ch in 0..3 {
                let mut block = x.slice_mut(s![ch, r0..r1, c0..c1]);
                let mean = block.mean().unwrap_or(0.0);
                block.fill(mean);
            }
        }
    }
}

/// Random geometric and photometric augmentation. Geometric transforms act
/// on image and labels alike; photometric ones touch the image only. Targets
/// derived afterwards via [`make_targets`] are regenerated from the warped
/// instance map.
pub fn augment(img: &AnnotatedImage, cfg: &AugmentConfig, seed: u64) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    if rng.random_bool(cfg.flip_p.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(cfg.flip_p.clamp(0.0, 1.0)) {
        out = flip_vertical(&out);
    }
    if rng.random_bool(cfg.rot90_p.clamp(0.0, 1.0)) {
        for _ in 0..rng.random_range(1..4) {
            out = rotate90(&out);
        }
    }
    let rotate = rng.random_bool(cfg.rotate_p.clamp(0.0, 1.0));
    let elastic = rng.random_bool(cfg.elastic_p.clamp(0.0, 1.0));
    if rotate || elastic {
        let (h, w) = out.dim();
        let theta = if rotate { rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians() } else { 0.0 };
        let (dr, dc) = if elastic {
            let mut field = || {
                let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
                smooth(&raw, cfg.elastic_sigma) * cfg.elastic_alpha
            };
            (field(), field())
        } else {
            (Array2::zeros((h, w)), Array2::zeros((h, w)))
        };
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = theta.sin_cos();
        out = warp(&out, |r, c| {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            (cy + cos * y - sin * x + dr[[r, c]], cx + sin * y + cos * x + dc[[r, c]])
        });
        out.repair_types();
    }

    let photometric = [cfg.jitter_p, cfg.blur_p, cfg.noise_p, cfg.superpixel_p].map(|p| rng.random_bool(p.clamp(0.0, 1.0)));
    if photometric.iter().any(|&b| b) {
        let mut x = to_float(&out.rgb);
        if photometric[0] {
            let mut f = || 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
            let (b, c, s) = (f(), f(), f());
            color_jitter(&mut x, b, c, s);
        }
        if photometric[1] && cfg.blur_max_kernel >= 3 {
            let sizes: Vec<usize> = (3..=cfg.blur_max_kernel).step_by(2).collect();
            x = gaussian_blur(&x, sizes[rng.random_range(0..sizes.len())]);
        }
        if photometric[2] && cfg.noise_sigma > 0.0 {
            let sigma = rng.random_range(0.0..=cfg.noise_sigma);
            if let Ok(normal) = Normal::new(0.0, sigma) {
                x.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
        }
        if photometric[3] {
            superpixels(&mut x, cfg.superpixel_cell, &mut rng);
        }
        out.rgb = to_bytes(&x);
    }
    out
}

// Balanced sampling.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Exponent on inverse tissue frequency.
    pub gamma_s: f64,
    /// Boost per rare-class nucleus.
    pub beta_r: f64,
    pub rare_classes: Vec<u8>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { gamma_s: 1.0, beta_r: 0.1, rare_classes: vec![PANNUKE_DEAD] }
    }
}

/// `weight(i) = (1 / freq(tissue_i))^gamma_s * (1 + beta_r * rare_i)`.
pub fn sampling_weights(tissues: &[u32], rare_counts: &[usize], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    if tissues.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    if tissues.len() != rare_counts.len() {
        return Err(Error::Shape("tissue and rare-count lengths differ".into()));
    }
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in tissues {
        *freq.entry(t).or_default() += 1;
    }
    let n = tissues.len() as f64;
    Ok(tissues
        .iter()
        .zip(rare_counts)
        .map(|(t, &rare)| (n / freq[t] as f64).powf(cfg.gamma_s) * (1.0 + cfg.beta_r * rare as f64))
        .collect())
}

/// Infinite reproducible stream of dataset indices.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

pub fn balanced_sampler(dataset: &[AnnotatedImage], cfg: &SamplerConfig, seed: u64) -> Result<BalancedSampler> {
    let max_class = cfg.rare_classes.iter().copied().max().unwrap_or(0) as usize + 1;
    let tissues: Vec<u32> = dataset.iter().map(|d| d.tissue).collect();
    let rare: Vec<usize> = dataset
        .iter()
        .map(|d| {
            let counts = d.class_counts(max_class.max(256));
            cfg.rare_classes.iter().map(|&c| counts[c as usize]).sum()
        })
        .collect();
    sampler_from_weights(&sampling_weights(&tissues, &rare, cfg)?, seed)
}

pub fn sampler_from_weights(weights: &[f64], seed: u64) -> Result<BalancedSampler> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Dataset(format!("sampling weights: {e}")))?;
    Ok(BalancedSampler { dist, rng: ChaCha8Rng::seed_from_u64(seed) })
}

// Synthetic fixtures.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub centre: (f64, f64),
    pub radius: f64,
    pub class: u8,
}

/// Paint disks into an instance map; pixels covered by several disks go to
/// the disk with the nearest centre (ties to the earlier disk). Ids follow
/// the order of `disks`.
pub fn paint_disks(height: usize, width: usize, disks: &[Disk]) -> (InstanceMap, Array2<u8>) {
    let mut labels = Array2::zeros((height, width));
    let mut types = Array2::zeros((height, width));
    for r in 0..height {
        for c in 0..width {
            let mut best: Option<(f64, usize)> = None;
            for (i, d) in disks.iter().enumerate() {
                let dist = ((r as f64 - d.centre.0).powi(2) + (c as f64 - d.centre.1).powi(2)).sqrt();
                if dist <= d.radius && best.is_none_or(|(b, _)| dist < b) {
                    best = Some((dist, i));
                }
            }
            if let Some((_, i)) = best {
                labels[[r, c]] = i as u32 + 1;
                types[[r, c]] = disks[i].class;
            }
        }
    }
    (InstanceMap::from_array(labels), types)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub size: usize,
    pub min_disks: usize,
    pub max_disks: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Minimum empty gap between disk rims.
    pub gap: f64,
    /// Classes including background.
    pub num_classes: usize,
    pub num_tissues: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_disks: 3,
            max_disks: 6,
            min_radius: 4.0,
            max_radius: 7.0,
            gap: 3.0,
            num_classes: 3,
            num_tissues: 2,
            noise: 0.03,
        }
    }
}

/// Stain-like colour of nucleus class `k` (background for 0).
fn class_colour(k: u8, tissue: u32) -> [f64; 3] {
    match k {
        0 => [0.93, 0.78 + 0.04 * (tissue % 3) as f64, 0.86],
        k => {
            let t = (k - 1) as f64;
            [0.35 + 0.15 * (t % 3.0), 0.18 + 0.1 * ((t + 1.0) % 2.0), 0.55 - 0.1 * (t % 2.0)]
        }
    }
}

/// Images of well-separated disks on a tinted background with pixel noise.
pub fn synthetic_disks(count: usize, cfg: &SyntheticConfig, seed: u64) -> Vec<AnnotatedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap_or_else(|_| Normal::new(0.0, 0.0).expect("zero noise"));
    (0..count)
        .map(|i| {
            let s = cfg.size as f64;
            let target = rng.random_range(cfg.min_disks..=cfg.max_disks.max(cfg.min_disks));
            let mut disks: Vec<Disk> = Vec::new();
            for _ in 0..200 {
                if disks.len() >= target {
                    break;
                }
                let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
                let margin = radius + 1.0;
                if s <= 2.0 * margin {
                    break;
                }
                let centre = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
                let free = disks.iter().all(|d| {
                    let dist = ((d.centre.0 - centre.0).powi(2) + (d.centre.1 - centre.1).powi(2)).sqrt();
                    dist > d.radius + radius + cfg.gap
                });
                if free {
                    let class = rng.random_range(1..cfg.num_classes.max(2)) as u8;
                    disks.push(Disk { centre, radius, class });
                }
            }
            let tissue = rng.random_range(0..cfg.num_tissues.max(1)) as u32;
            let (instances, types) = paint_disks(cfg.size, cfg.size, &disks);
            let mut rgb = Array3::zeros((3, cfg.size, cfg.size));
            for r in 0..cfg.size {
                for c in 0..cfg.size {
                    let colour = class_colour(types[[r, c]], tissue);
                    for ch in 0..3 {
                        let v = colour[ch] + noise.sample(&mut rng);
                        rgb[[ch, r, c]] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            AnnotatedImage::new(format!("synth_{i:04}"), rgb, instances, types, tissue, 0).expect("consistent shapes")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use npyz::WriterBuilder;

    fn brute_hv(map: &InstanceMap) -> Array3<f32> {
        let (h, w) = map.dim();
        let mut out = Array3::zeros((2, h, w));
        for id in map.ids() {
            let px: Vec<(usize, usize)> = map.labels().indexed_iter().filter(|(_, &v)| v == id).map(|(p, _)| p).collect();
            let n = px.len() as f64;
            let cr = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cc = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            let min_c = px.iter().map(|p| p.1 as f64 - cc).fold(f64::INFINITY, f64::min);
            let max_c = px.iter().map(|p| p.1 as f64 - cc).fold(f64::NEG_INFINITY, f64::max);
            let min_r = px.iter().map(|p| p.0 as f64 - cr).fold(f64::INFINITY, f64::min);
            let max_r = px.iter().map(|p| p.0 as f64 - cr).fold(f64::NEG_INFINITY, f64::max);
            for &(r, c) in &px {
                let x = c as f64 - cc;
                let y = r as f64 - cr;
                out[[0, r, c]] = if x < 0.0 { x / min_c.abs() } else if x > 0.0 { x / max_c } else { 0.0 } as f32;
                out[[1, r, c]] = if y < 0.0 { y / min_r.abs() } else if y > 0.0 { y / max_r } else { 0.0 } as f32;
            }
        }
        out
    }

    #[test]
    fn strip_spans_minus_one_to_one() {
        let map = InstanceMap::from_array(array![[1u32, 1, 1, 1, 1]]);
        let hv = make_hv_target(&map);
        assert_eq!(hv.slice(s![0, 0, ..]).to_vec(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(hv.slice(s![1, .., ..]).iter().all(|&v| v == 0.0));
        assert!(make_hv_target(&InstanceMap::new(4, 4)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_squares_match_brute_force() {
        let mut labels = Array2::zeros((8, 8));
        labels.slice_mut(s![0..3, 0..3]).fill(1);
        labels.slice_mut(s![4..7, 4..7]).fill(2);
        let map = InstanceMap::from_array(labels);
        let hv = make_hv_target(&map);
        assert_eq!(hv, brute_hv(&map));
        for id in [1, 2] {
            for ch in 0..2 {
                let vals: Vec<f32> =
                    map.labels().indexed_iter().filter(|(_, &v)| v == id).map(|((r, c), _)| hv[[ch, r, c]]).collect();
                assert_eq!(vals.iter().cloned().fold(f32::INFINITY, f32::min), -1.0);
                assert_eq!(vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
            }
        }
    }

    #[test]
    fn identity_augmentation_is_passthrough() {
        let img = synthetic_disks(1, &SyntheticConfig::default(), 3).remove(0);
        assert_eq!(augment(&img, &AugmentConfig::none(), 9), img);
    }

    #[test]
    fn horizontal_flip_negates_and_mirrors_hv() {
        let img = synthetic_disks(1, &SyntheticConfig::default(), 4).remove(0);
        let flipped = flip_horizontal(&img);
        let a = make_hv_target(&img.instances);
        let b = make_hv_target(&flipped.instances);
        let mirrored = a.slice(s![0, .., ..;-1]).mapv(|v| -v);
        let diff = (&b.slice(s![0, .., ..]) - &mirrored).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        assert!(diff < 1e-6);
    }

    #[test]
    fn rotation_swaps_hv_channels() {
        let img = synthetic_disks(1, &SyntheticConfig::default(), 5).remove(0);
        let rot = rotate90(&img);
        let a = make_hv_target(&img.instances);
        let b = make_hv_target(&rot.instances);
        // Counter-clockwise: new row = W-1-c, new col = r.
        let w = img.dim().1;
        for ((r, c), &id) in img.instances.labels().indexed_iter() {
            if id == 0 {
                continue;
            }
            let (nr, nc) = (w - 1 - c, r);
            assert!((b[[0, nr, nc]] - a[[1, r, c]]).abs() < 1e-6);
            assert!((b[[1, nr, nc]] + a[[0, r, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn augmented_targets_match_instances() {
        let img = synthetic_disks(1, &SyntheticConfig::default(), 6).remove(0);
        let cfg = AugmentConfig { rotate_p: 1.0, elastic_p: 1.0, ..AugmentConfig::default() };
        for seed in 0..5 {
            let out = augment(&img, &cfg, seed);
            assert!(out.is_consistent());
            let t = make_targets(&out);
            assert_eq!(t.np.mapv(|v| v > 0.0), out.instances.foreground());
            assert!(t.hv.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn repair_uses_majority_vote() {
        let labels = array![[1u32, 1, 1], [0, 2, 2]];
        let types = array![[2u8, 3, 3], [1, 0, 0]];
        let mut img = AnnotatedImage::new("x", Array3::zeros((3, 2, 3)), InstanceMap::from_array(labels), types, 0, 0)
            .unwrap();
        img.repair_types();
        assert!(img.is_consistent());
        assert_eq!(img.types, array![[3, 3, 3], [0, 0, 0]]);
        assert_eq!(img.instances.labels(), &array![[1, 1, 1], [0, 0, 0]]);
    }

    #[test]
    fn sampler_balances_tissues() {
        let tissues: Vec<u32> = (0..100).map(|i| (i >= 90) as u32).collect();
        let w = sampling_weights(&tissues, &vec![0; 100], &SamplerConfig::default()).unwrap();
        let sampler = sampler_from_weights(&w, 1).unwrap();
        let minority = sampler.take(10_000).filter(|&i| i >= 90).count() as f64 / 10_000.0;
        assert!((minority - 0.5).abs() < 0.05, "{minority}");
        let a: Vec<usize> = sampler_from_weights(&w, 7).unwrap().take(50).collect();
        let b: Vec<usize> = sampler_from_weights(&w, 7).unwrap().take(50).collect();
        assert_eq!(a, b);
        assert!(sampling_weights(&[], &[], &SamplerConfig::default()).is_err());
    }

    #[test]
    fn class_alignment() {
        let consep = ExternalDataset::CoNSeP;
        let names = consep.aligned_names();
        assert_eq!(names[consep.align_source(3).unwrap() as usize], "Epithelial");
        assert_eq!(names[consep.align_source(5).unwrap() as usize], "Miscellaneous");
        assert_eq!(names[consep.align_source(4).unwrap() as usize], "Neoplastic");
        let gly = ExternalDataset::GlySAC;
        assert_eq!(gly.aligned_names()[gly.align_source(2).unwrap() as usize], "Inflammatory");
        assert!(consep.align_source(8).is_err());
        assert_eq!(gly.align_pannuke(1).unwrap(), gly.align_pannuke(5).unwrap());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = synthetic_disks(2, &SyntheticConfig::default(), 11);
        save_dataset(dir.path(), &images).unwrap();
        let loaded = load_pannuke(dir.path(), None, 6, 19).unwrap();
        assert_eq!(loaded, images);
        let empty = tempfile::tempdir().unwrap();
        assert!(load_pannuke(empty.path(), None, 6, 19).unwrap().is_empty());
        assert!(load_pannuke(dir.path(), None, 2, 19).is_err());
    }

    #[test]
    fn resize_keeps_label_set() {
        let img = synthetic_disks(1, &SyntheticConfig { size: 50, ..SyntheticConfig::default() }, 2).remove(0);
        let big = resize_annotated(&img, 64, 64).unwrap();
        assert_eq!(big.dim(), (64, 64));
        assert_eq!(big.instances.ids(), img.instances.ids());
    }

    #[test]
    fn npy_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let (n, h, w) = (2usize, 4usize, 4usize);
        let images: Vec<f64> = (0..n * h * w * 3).map(|i| (i % 256) as f64).collect();
        let mut masks = vec![0.0f64; n * h * w * 6];
        // image 0: neoplastic instance 7 at (0,0)-(0,1); dead instance 7 at (3,3)
        masks[0] = 7.0;
        masks[6] = 7.0;
        masks[(3 * w + 3) * 6 + 3] = 7.0;
        let write = |name: &str, shape: &[u64], data: &[f64]| {
            let path = dir.path().join(name);
            let mut out = npyz::WriteOptions::new().default_dtype().shape(shape).writer(fs::File::create(&path).unwrap()).begin_nd().unwrap();
            out.extend(data.iter().copied()).unwrap();
            out.finish().unwrap();
        };
        write("images.npy", &[n as u64, h as u64, w as u64, 3], &images);
        write("masks.npy", &[n as u64, h as u64, w as u64, 6], &masks);
        let tpath = dir.path().join("types.npy");
        let mut out = npyz::WriteOptions::new()
            .dtype(npyz::DType::Plain("<U6".parse().unwrap()))
            .shape(&[2])
            .writer(fs::File::create(&tpath).unwrap())
            .begin_nd()
            .unwrap();
        out.extend(["Breast".to_string(), "Colon".to_string()]).unwrap();
        out.finish().unwrap();
        let arrays = PannukeArrays::find(dir.path()).unwrap();
        let out_dir = dir.path().join("out");
        assert_eq!(convert_pannuke(&arrays, &out_dir, 1).unwrap(), 2);
        let loaded = load_pannuke(&out_dir, Some(1), 6, 19).unwrap();
        assert_eq!(loaded[0].instances.num_instances(), 2);
        assert_eq!(loaded[0].types[[0, 1]], 1);
        assert_eq!(loaded[0].types[[3, 3]], 4);
        assert_eq!(loaded[0].tissue, 3);
        assert_eq!(loaded[1].tissue, 5);
        assert_eq!(loaded[0].rgb[[1, 0, 0]], 1);
    }
}
