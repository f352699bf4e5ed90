use std::path::Path;

use ndarray::Array2;

use crate::data::{load_pannuke, read_types, AnnotatedImage, PANNUKE_CLASS_NAMES, PANNUKE_TISSUES};
use crate::instance::InstanceMap;
use crate::metrics::{aggregate_report, image_metrics, MetricsReport};
use crate::postprocess::{read_detections, type_map};
use crate::{Error, Result};

/// Where a prediction for one image was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionSource {
    /// `<id>_inst.png` plus `<id>_detections.jsonl` as written by inference.
    InferOutput,
    /// `labels/<id>_inst.png` plus `labels/<id>_type.png` as in a dataset.
    Dataset,
}

/// Instance map and per-pixel classes of image `id` under `dir`.
pub fn load_prediction(dir: &Path, id: &str) -> Result<(InstanceMap, Array2<u8>, PredictionSource)> {
    let inst_path = dir.join(format!("{id}_inst.png"));
    if inst_path.exists() {
        let inst = InstanceMap::read_png(&inst_path)?;
        let det_path = dir.join(format!("{id}_detections.jsonl"));
        let nuclei = if det_path.exists() { read_detections(&det_path)? } else { Vec::new() };
        let types = type_map(&inst, &nuclei);
        return Ok((inst, types, PredictionSource::InferOutput));
    }
    let labels = dir.join("labels");
    let inst_path = labels.join(format!("{id}_inst.png"));
    if inst_path.exists() {
        let inst = InstanceMap::read_png(&inst_path)?;
        let types = read_types(&labels.join(format!("{id}_type.png")))?;
        return Ok((inst, types, PredictionSource::Dataset));
    }
    Err(Error::Dataset(format!("no prediction for `{id}` under {}", dir.display())))
}

fn names(count: usize, known: &[&'static str], stem: &str) -> Vec<String> {
    if count == known.len() {
        known.iter().map(|s| s.to_string()).collect()
    } else {
        (0..count).map(|k| format!("{stem}_{k}")).collect()
    }
}

/// Metrics of predictions paired with ground-truth images.
pub fn evaluate_pairs(
    gt: &[AnnotatedImage],
    predictions: &[(InstanceMap, Array2<u8>)],
    num_classes: usize,
    num_tissues: usize,
    match_radius: f64,
) -> Result<MetricsReport> {
    if gt.len() != predictions.len() {
        return Err(Error::Dataset(format!("{} ground-truth images vs {} predictions", gt.len(), predictions.len())));
    }
    let per_image = gt
        .iter()
        .zip(predictions)
        .map(|(g, (inst, types))| {
            image_metrics(&g.id, g.tissue, &g.instances, &g.types, inst, types, num_classes, match_radius)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = names(num_classes, &PANNUKE_CLASS_NAMES, "class");
    let tissues = names(num_tissues, &PANNUKE_TISSUES, "tissue");
    let class_refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let tissue_refs: Vec<&str> = tissues.iter().map(String::as_str).collect();
    aggregate_report(&per_image, &class_refs, &tissue_refs)
}

/// Scores every image of the dataset at `gt_dir` against `pred_dir`.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    num_classes: usize,
    num_tissues: usize,
    match_radius: f64,
) -> Result<MetricsReport> {
    let gt = load_pannuke(gt_dir, None, num_classes, num_tissues)?;
    if gt.is_empty() {
        return Err(Error::Dataset(format!("{}: no ground-truth images", gt_dir.display())));
    }
    let preds = gt
        .iter()
        .map(|g| load_prediction(pred_dir, &g.id).map(|(i, t, _)| (i, t)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(&gt, &preds, num_classes, num_tissues, match_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_dataset, synthetic_disks, SyntheticConfig};
    use crate::postprocess::assign_types;
    use crate::runtime::write_outputs;

    #[test]
    fn identical_directories_score_one() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synthetic_disks(3, &SyntheticConfig::default(), 5);
        save_dataset(dir.path(), &imgs).unwrap();
        let r = evaluate_dirs(dir.path(), dir.path(), 3, 2, 12.0).unwrap();
        assert_eq!(r.bpq, Some(1.0));
        assert_eq!(r.mpq, Some(1.0));
        assert_eq!(r.detection.f1, 1.0);

        let pred = dir.path().join("pred");
        for img in &imgs {
            let probs = ndarray::Array3::from_shape_fn((3, 64, 64), |(k, r, c)| (img.types[[r, c]] as usize == k) as u8 as f32);
            let nuclei = assign_types(&img.instances, &probs).unwrap();
            write_outputs(&pred, &img.id, &img.rgb, &img.instances, &nuclei, false).unwrap();
        }
        let r = evaluate_dirs(&pred, dir.path(), 3, 2, 12.0).unwrap();
        assert_eq!(r.mpq, Some(1.0));
        assert!(evaluate_dirs(&dir.path().join("nowhere"), dir.path(), 3, 2, 12.0).is_err());
    }
}
