use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::data::write_rgb;
use crate::instance::{neighbours, Connectivity, InstanceMap};
use crate::postprocess::{type_map, write_detections, TypedNucleus};
use crate::{Error, Result};

/// Boundary colour of class `k`; class 0 (untyped) is white.
pub fn class_palette(k: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] =
        [[255, 255, 255], [255, 0, 0], [0, 200, 0], [0, 80, 255], [255, 220, 0], [255, 128, 0]];
    PALETTE[k as usize % PALETTE.len()]
}

/// Copy of `rgb` with every instance's 4-connected boundary painted in its
/// class colour.
pub fn render_overlay(rgb: &Array3<u8>, instances: &InstanceMap, nuclei: &[TypedNucleus]) -> Result<Array3<u8>> {
    let (_, h, w) = rgb.dim();
    if instances.dim() != (h, w) {
        return Err(Error::Shape(format!("image {h}x{w} vs instances {:?}", instances.dim())));
    }
    let types = type_map(instances, nuclei);
    let labels = instances.labels();
    let mut out = rgb.clone();
    for ((r, c), &id) in labels.indexed_iter() {
        if id == 0 {
            continue;
        }
        let on_edge = r == 0
            || c == 0
            || r + 1 == h
            || c + 1 == w
            || neighbours((r, c), (h, w), Connectivity::Four).any(|q| labels[q] != id);
        if on_edge {
            let colour = class_palette(types[[r, c]]);
            for (ch, v) in colour.into_iter().enumerate() {
                out[[ch, r, c]] = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputPaths {
    pub instances: PathBuf,
    pub detections: PathBuf,
    pub overlay: Option<PathBuf>,
}

impl OutputPaths {
    pub fn new(dir: &Path, id: &str, overlay: bool) -> Self {
        Self {
            instances: dir.join(format!("{id}_inst.png")),
            detections: dir.join(format!("{id}_detections.jsonl")),
            overlay: overlay.then(|| dir.join(format!("{id}_overlay.png"))),
        }
    }
}

/// Writes `<id>_inst.png`, `<id>_detections.jsonl` and, when requested,
/// `<id>_overlay.png` into `dir`.
pub fn write_outputs(
    dir: &Path,
    id: &str,
    rgb: &Array3<u8>,
    instances: &InstanceMap,
    nuclei: &[TypedNucleus],
    overlay: bool,
) -> Result<OutputPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = OutputPaths::new(dir, id, overlay);
    instances.write_png(&paths.instances)?;
    write_detections(&paths.detections, nuclei)?;
    if let Some(p) = &paths.overlay {
        write_rgb(p, &render_overlay(rgb, instances, nuclei)?)?;
    }
    Ok(paths)
}

/// `(id, path)` of every PNG in `dir`, or in `dir/images` for a dataset
/// directory, sorted by id.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let images = dir.join("images");
    let root = if images.is_dir() { images } else { dir.to_path_buf() };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let path = entry.map_err(|e| Error::io(&root, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if ["_inst", "_type", "_overlay"].iter().any(|suffix| stem.ends_with(suffix)) {
            continue;
        }
        out.push((stem.to_string(), path));
    }
    out.sort();
    Ok(out)
}
