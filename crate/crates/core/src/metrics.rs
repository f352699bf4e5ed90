//! Instance matching, panoptic quality, detection scores and per-tissue
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::instance::InstanceMap;
use crate::{Error, Result};

/// Unique IoU > 0.5 pairing of ground-truth and predicted instances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt_id, pred_id, iou)` sorted by gt id.
    pub tp_pairs: Vec<(u32, u32, f64)>,
    pub fp_ids: Vec<u32>,
    pub fn_ids: Vec<u32>,
}

fn areas(map: &InstanceMap) -> BTreeMap<u32, usize> {
    let mut a = BTreeMap::new();
    for &v in map.labels().iter() {
        if v > 0 {
            *a.entry(v).or_default() += 1;
        }
    }
    a
}

/// Pairs with IoU > 0.5 are necessarily unique, so no assignment step is needed.
pub fn match_instances(gt: &InstanceMap, pred: &InstanceMap) -> Result<MatchResult> {
    if gt.dim() != pred.dim() {
        return Err(Error::Shape(format!("ground truth {:?} vs prediction {:?}", gt.dim(), pred.dim())));
    }
    let (ga, pa) = (areas(gt), areas(pred));
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut tp_pairs = Vec::new();
    for (&(g, p), &i) in &inter {
        let iou = i as f64 / (ga[&g] + pa[&p] - i) as f64;
        if iou > 0.5 {
            tp_pairs.push((g, p, iou));
        }
    }
    let matched_g: Vec<u32> = tp_pairs.iter().map(|t| t.0).collect();
    let matched_p: Vec<u32> = tp_pairs.iter().map(|t| t.1).collect();
    Ok(MatchResult {
        fp_ids: pa.keys().copied().filter(|p| !matched_p.contains(p)).collect(),
        fn_ids: ga.keys().copied().filter(|g| !matched_g.contains(g)).collect(),
        tp_pairs,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqScores {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// `DQ = TP / (TP + FP/2 + FN/2)`, `SQ` = mean IoU of TP pairs (0 without
/// TPs), `PQ = DQ * SQ`. An empty match gives all zeros.
pub fn panoptic_quality(m: &MatchResult) -> PqScores {
    let (tp, fp, fn_) = (m.tp_pairs.len(), m.fp_ids.len(), m.fn_ids.len());
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let dq = if denom > 0.0 { tp as f64 / denom } else { 0.0 };
    let sq = if tp > 0 { m.tp_pairs.iter().map(|t| t.2).sum::<f64>() / tp as f64 } else { 0.0 };
    PqScores { dq, sq, pq: dq * sq, tp, fp, fn_ }
}

/// Class of each instance by majority vote over its pixels in `types`
/// (ties toward the lower class).
pub fn instance_classes(inst: &InstanceMap, types: &Array2<u8>) -> BTreeMap<u32, u8> {
    let mut votes: BTreeMap<u32, BTreeMap<u8, usize>> = BTreeMap::new();
    for (&id, &t) in inst.labels().iter().zip(types.iter()) {
        if id > 0 {
            *votes.entry(id).or_default().entry(t).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .map(|(id, v)| (id, v.iter().rev().max_by_key(|(_, &n)| n).map(|(&t, _)| t).unwrap_or(0)))
        .collect()
}

fn restrict(inst: &InstanceMap, classes: &BTreeMap<u32, u8>, class: u8) -> InstanceMap {
    InstanceMap::from_array(inst.labels().mapv(|v| if v > 0 && classes.get(&v) == Some(&class) { v } else { 0 }))
}

/// Binary and per-class PQ of one image. `None` marks a quantity undefined
/// because both maps are empty (binary) or the class is absent from both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub binary: PqScores,
    pub bpq: Option<f64>,
    pub mpq: Option<f64>,
    /// Entry `k` is class `k + 1`.
    pub per_class: Vec<Option<PqScores>>,
}

pub fn pq_binary_and_multiclass(
    gt_inst: &InstanceMap,
    gt_types: &Array2<u8>,
    pred_inst: &InstanceMap,
    pred_types: &Array2<u8>,
    num_classes: usize,
) -> Result<ClassPq> {
    let binary_match = match_instances(gt_inst, pred_inst)?;
    let binary = panoptic_quality(&binary_match);
    let bpq = (!(gt_inst.is_empty() && pred_inst.is_empty())).then_some(binary.pq);
    let (gc, pc) = (instance_classes(gt_inst, gt_types), instance_classes(pred_inst, pred_types));
    let mut per_class = Vec::new();
    for class in 1..num_classes as u8 {
        let g = restrict(gt_inst, &gc, class);
        let p = restrict(pred_inst, &pc, class);
        per_class.push(if g.is_empty() && p.is_empty() { None } else { Some(panoptic_quality(&match_instances(&g, &p)?)) });
    }
    let present: Vec<f64> = per_class.iter().flatten().map(|s| s.pq).collect();
    let mpq = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(ClassPq { binary, bpq, mpq, per_class })
}

// Detection.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    /// `(row, col)`
    pub pos: (f64, f64),
    pub class: u8,
}

pub fn centroids(inst: &InstanceMap, types: &Array2<u8>) -> Vec<Centroid> {
    let classes = instance_classes(inst, types);
    inst.regions().into_values().map(|r| Centroid { pos: r.centroid, class: classes[&r.id] }).collect()
}

/// Greedy pairing: all `(gt, pred)` pairs within `radius` sorted by distance
/// (then gt index, then pred index) are accepted while both are free.
pub fn pair_centroids(gt: &[Centroid], pred: &[Centroid], radius: f64) -> Result<Vec<(usize, usize)>> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("pairing radius must be positive, got {radius}")));
    }
    let mut cand = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = ((g.pos.0 - p.pos.0).powi(2) + (g.pos.1 - p.pos.1).powi(2)).sqrt();
            if d <= radius {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut gu, mut pu) = (vec![false; gt.len()], vec![false; pred.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !gu[i] && !pu[j] {
            gu[i] = true;
            pu[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Counts entering the per-class scores of class `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    /// Paired, both labelled `c`.
    pub tp_c: usize,
    /// Paired, both labelled the same class other than `c`.
    pub tn_c: usize,
    /// Paired, predicted `c`, ground truth another class.
    pub fp_c: usize,
    /// Paired, ground truth `c`, predicted another class.
    pub fn_c: usize,
    /// Unpaired predictions of class `c`.
    pub fp_d: usize,
    /// Unpaired ground truth of class `c`.
    pub fn_d: usize,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.tp_c += o.tp_c;
        self.tn_c += o.tn_c;
        self.fp_c += o.fp_c;
        self.fn_c += o.fn_c;
        self.fp_d += o.fp_d;
        self.fn_d += o.fn_d;
    }

    /// `(P_c, R_c, F1_c)`; a score is `None` when its denominator is zero.
    pub fn scores(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let good = (self.tp_c + self.tn_c) as f64;
        let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
        (
            ratio(good, good + 2.0 * self.fp_c as f64 + self.fp_d as f64),
            ratio(good, good + 2.0 * self.fn_c as f64 + self.fn_d as f64),
            ratio(
                2.0 * good,
                2.0 * good + 2.0 * self.fp_c as f64 + 2.0 * self.fn_c as f64 + self.fp_d as f64 + self.fn_d as f64,
            ),
        )
    }
}

/// Poolable detection counts of one or more images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Paired detections whose classes agree.
    pub type_correct: usize,
    /// Entry `k` is class `k + 1`.
    pub per_class: Vec<ClassCounts>,
}

impl DetectionCounts {
    pub fn merge(&mut self, o: &DetectionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.type_correct += o.type_correct;
        if self.per_class.len() < o.per_class.len() {
            self.per_class.resize(o.per_class.len(), ClassCounts::default());
        }
        for (a, b) in self.per_class.iter_mut().zip(&o.per_class) {
            a.add(b);
        }
    }

    pub fn scores(&self) -> DetectionScores {
        let ratio = |n: usize, d: usize| if d > 0 { n as f64 / d as f64 } else { 0.0 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        DetectionScores {
            precision,
            recall,
            f1,
            type_accuracy: (self.tp > 0).then(|| ratio(self.type_correct, self.tp)),
            per_class: self
                .per_class
                .iter()
                .map(|c| {
                    let (p, r, f) = c.scores();
                    ClassDetection { precision: p, recall: r, f1: f }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of paired detections with the correct class.
    pub type_accuracy: Option<f64>,
    /// Entry `k` is class `k + 1`.
    pub per_class: Vec<ClassDetection>,
}

pub fn detection_counts(gt: &[Centroid], pred: &[Centroid], radius: f64, num_classes: usize) -> Result<DetectionCounts> {
    let pairs = pair_centroids(gt, pred, radius)?;
    let (mut gp, mut pp) = (vec![false; gt.len()], vec![false; pred.len()]);
    let mut counts = DetectionCounts {
        tp: pairs.len(),
        per_class: vec![ClassCounts::default(); num_classes.saturating_sub(1)],
        ..Default::default()
    };
    for &(i, j) in &pairs {
        gp[i] = true;
        pp[j] = true;
        let (g, p) = (gt[i].class, pred[j].class);
        counts.type_correct += (g == p) as usize;
        for (k, cc) in counts.per_class.iter_mut().enumerate() {
            let c = k as u8 + 1;
            match (g == c, p == c) {
                (true, true) => cc.tp_c += 1,
                (false, true) => cc.fp_c += 1,
                (true, false) => cc.fn_c += 1,
                (false, false) if g == p => cc.tn_c += 1,
                (false, false) => {}
            }
        }
    }
    for p in pred.iter().zip(&pp).filter(|(_, &m)| !m).map(|(p, _)| p) {
        counts.fp += 1;
        if let Some(cc) = (p.class as usize).checked_sub(1).and_then(|k| counts.per_class.get_mut(k)) {
            cc.fp_d += 1;
        }
    }
    for g in gt.iter().zip(&gp).filter(|(_, &m)| !m).map(|(g, _)| g) {
        counts.fn_ += 1;
        if let Some(cc) = (g.class as usize).checked_sub(1).and_then(|k| counts.per_class.get_mut(k)) {
            cc.fn_d += 1;
        }
    }
    Ok(counts)
}

pub fn detection_scores(gt: &[Centroid], pred: &[Centroid], radius: f64, num_classes: usize) -> Result<DetectionScores> {
    Ok(detection_counts(gt, pred, radius, num_classes)?.scores())
}

// Aggregation.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub tissue: u32,
    pub pq: ClassPq,
    pub detection: DetectionCounts,
}

#[allow(clippy::too_many_arguments)]
pub fn image_metrics(
    id: &str,
    tissue: u32,
    gt_inst: &InstanceMap,
    gt_types: &Array2<u8>,
    pred_inst: &InstanceMap,
    pred_types: &Array2<u8>,
    num_classes: usize,
    radius: f64,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        id: id.to_string(),
        tissue,
        pq: pq_binary_and_multiclass(gt_inst, gt_types, pred_inst, pred_types, num_classes)?,
        detection: detection_counts(&centroids(gt_inst, gt_types), &centroids(pred_inst, pred_types), radius, num_classes)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueRow {
    pub tissue: u32,
    pub name: String,
    pub images: usize,
    pub bpq: Option<f64>,
    pub mpq: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_count: usize,
    pub class_names: Vec<String>,
    /// Rows in ascending tissue index.
    pub tissues: Vec<TissueRow>,
    /// Across tissue means.
    pub bpq_over_tissues: Option<MeanStd>,
    pub mpq_over_tissues: Option<MeanStd>,
    /// Image-level means.
    pub bpq: Option<f64>,
    pub mpq: Option<f64>,
    pub binary_dq: Option<f64>,
    pub binary_sq: Option<f64>,
    /// Image-level mean PQ of class `k + 1`.
    pub class_pq: Vec<Option<f64>>,
    /// Pooled over all images.
    pub detection: DetectionScores,
    pub detection_counts: DetectionCounts,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    MeanStd::of(&v).map(|m| m.mean)
}

/// Per-tissue means and their mean and population std; images are reduced
/// in a canonical order so the report does not depend on input order.
pub fn aggregate_report(per_image: &[ImageMetrics], class_names: &[&str], tissue_names: &[&str]) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Dataset("no images to aggregate".into()));
    }
    let mut sorted: Vec<&ImageMetrics> = per_image.iter().collect();
    sorted.sort_by(|a, b| a.tissue.cmp(&b.tissue).then(a.id.cmp(&b.id)));
    let mut by_tissue: BTreeMap<u32, Vec<&ImageMetrics>> = BTreeMap::new();
    for m in &sorted {
        by_tissue.entry(m.tissue).or_default().push(m);
    }
    let tissues: Vec<TissueRow> = by_tissue
        .iter()
        .map(|(&t, ms)| TissueRow {
            tissue: t,
            name: tissue_names.get(t as usize).map_or_else(|| format!("tissue_{t}"), |s| s.to_string()),
            images: ms.len(),
            bpq: mean(ms.iter().filter_map(|m| m.pq.bpq)),
            mpq: mean(ms.iter().filter_map(|m| m.pq.mpq)),
        })
        .collect();
    let over = |f: fn(&TissueRow) -> Option<f64>| {
        let v: Vec<f64> = tissues.iter().filter_map(f).collect();
        MeanStd::of(&v)
    };
    let num_class = sorted.iter().map(|m| m.pq.per_class.len()).max().unwrap_or(0);
    let mut counts = DetectionCounts::default();
    for m in &sorted {
        counts.merge(&m.detection);
    }
    let with_nuclei = || sorted.iter().filter(|m| m.pq.bpq.is_some());
    Ok(MetricsReport {
        image_count: sorted.len(),
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        bpq_over_tissues: over(|r| r.bpq),
        mpq_over_tissues: over(|r| r.mpq),
        bpq: mean(sorted.iter().filter_map(|m| m.pq.bpq)),
        mpq: mean(sorted.iter().filter_map(|m| m.pq.mpq)),
        binary_dq: mean(with_nuclei().map(|m| m.pq.binary.dq)),
        binary_sq: mean(with_nuclei().map(|m| m.pq.binary.sq)),
        class_pq: (0..num_class).map(|k| mean(sorted.iter().filter_map(|m| m.pq.per_class.get(k).copied().flatten().map(|s| s.pq)))).collect(),
        detection: counts.scores(),
        detection_counts: counts,
        tissues,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    fn class_name(&self, k: usize) -> String {
        self.class_names.get(k + 1).cloned().unwrap_or_else(|| format!("class_{}", k + 1))
    }

    /// Structured `key=value` records.
    pub fn records(&self) -> Vec<String> {
        let mut out = vec![
            format!("images={}", self.image_count),
            format!("bpq={}", opt(self.bpq)),
            format!("mpq={}", opt(self.mpq)),
            format!("binary_dq={}", opt(self.binary_dq)),
            format!("binary_sq={}", opt(self.binary_sq)),
            format!("detection_precision={:.4}", self.detection.precision),
            format!("detection_recall={:.4}", self.detection.recall),
            format!("detection_f1={:.4}", self.detection.f1),
            format!("type_accuracy={}", opt(self.detection.type_accuracy)),
        ];
        for (name, ms) in [("bpq_tissue", self.bpq_over_tissues), ("mpq_tissue", self.mpq_over_tissues)] {
            out.push(format!("{name}_mean={}", opt(ms.map(|m| m.mean))));
            out.push(format!("{name}_std={}", opt(ms.map(|m| m.std))));
        }
        for (k, pq) in self.class_pq.iter().enumerate() {
            out.push(format!("pq[{}]={}", self.class_name(k), opt(*pq)));
        }
        for (k, d) in self.detection.per_class.iter().enumerate() {
            let n = self.class_name(k);
            out.push(format!("precision[{n}]={}", opt(d.precision)));
            out.push(format!("recall[{n}]={}", opt(d.recall)));
            out.push(format!("f1[{n}]={}", opt(d.f1)));
        }
        for t in &self.tissues {
            out.push(format!("tissue[{}].images={}", t.name, t.images));
            out.push(format!("tissue[{}].bpq={}", t.name, opt(t.bpq)));
            out.push(format!("tissue[{}].mpq={}", t.name, opt(t.mpq)));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} images", self.image_count)?;
        writeln!(f, "{:<16} {:>8} {:>8}", "Tissue", "bPQ", "mPQ")?;
        for t in &self.tissues {
            writeln!(f, "{:<16} {:>8} {:>8}", t.name, opt(t.bpq), opt(t.mpq))?;
        }
        let ms = |m: Option<MeanStd>| (opt(m.map(|v| v.mean)), opt(m.map(|v| v.std)));
        let (bm, bs) = ms(self.bpq_over_tissues);
        let (mm, mstd) = ms(self.mpq_over_tissues);
        writeln!(f, "{:<16} {:>8} {:>8}", "Average", bm, mm)?;
        writeln!(f, "{:<16} {:>8} {:>8}", "STD", bs, mstd)?;
        writeln!(f)?;
        writeln!(f, "{:<16} {:>8} {:>8} {:>8} {:>8}", "Class", "PQ", "P", "R", "F1")?;
        writeln!(
            f,
            "{:<16} {:>8} {:>8.4} {:>8.4} {:>8.4}",
            "Detection",
            opt(self.bpq),
            self.detection.precision,
            self.detection.recall,
            self.detection.f1
        )?;
        for (k, d) in self.detection.per_class.iter().enumerate() {
            let pq = self.class_pq.get(k).copied().flatten();
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>8} {:>8}",
                self.class_name(k),
                opt(pq),
                opt(d.precision),
                opt(d.recall),
                opt(d.f1)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};

    #[test]
    fn identity_match_is_perfect() {
        let m = InstanceMap::from_array(array![[1, 1, 0], [0, 2, 2]]);
        let r = match_instances(&m, &m).unwrap();
        assert!(r.fp_ids.is_empty() && r.fn_ids.is_empty());
        let pq = panoptic_quality(&r);
        assert_eq!((pq.dq, pq.sq, pq.pq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn below_threshold_is_fp_and_fn() {
        // IoU = 2 / 5 = 0.4
        let gt = InstanceMap::from_array(array![[1, 1, 1, 1, 0]]);
        let pred = InstanceMap::from_array(array![[0, 0, 1, 1, 1]]);
        let r = match_instances(&gt, &pred).unwrap();
        assert_eq!((r.tp_pairs.len(), r.fp_ids.len(), r.fn_ids.len()), (0, 1, 1));
    }

    #[test]
    fn hand_cases() {
        let m = MatchResult { tp_pairs: vec![(1, 1, 0.6)], ..Default::default() };
        let s = panoptic_quality(&m);
        assert!((s.dq - 1.0).abs() < 1e-12 && (s.sq - 0.6).abs() < 1e-12 && (s.pq - 0.6).abs() < 1e-12);
        let m = MatchResult { tp_pairs: vec![(1, 1, 0.8)], fp_ids: vec![2], fn_ids: vec![2] };
        let s = panoptic_quality(&m);
        assert!((s.dq - 0.5).abs() < 1e-12 && (s.pq - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_class_mpq_equals_bpq() {
        let mut gt = Array2::zeros((10, 10));
        gt.slice_mut(s![0..4, 0..4]).fill(1u32);
        gt.slice_mut(s![5..9, 5..9]).fill(2);
        let mut pred = gt.clone();
        pred.slice_mut(s![0..4, 3..4]).fill(0);
        let (gi, pi) = (InstanceMap::from_array(gt), InstanceMap::from_array(pred));
        let r = pq_binary_and_multiclass(&gi, &gi.foreground().mapv(u8::from), &pi, &pi.foreground().mapv(u8::from), 2).unwrap();
        assert_eq!(r.bpq, r.mpq);
    }

    #[test]
    fn per_class_detection_substitution() {
        let gt = [Centroid { pos: (0.0, 0.0), class: 1 }, Centroid { pos: (20.0, 0.0), class: 2 }];
        let pred = [Centroid { pos: (1.0, 0.0), class: 1 }, Centroid { pos: (21.0, 0.0), class: 1 }];
        let d = detection_counts(&gt, &pred, 12.0, 3).unwrap();
        assert_eq!(d.per_class[0], ClassCounts { tp_c: 1, fp_c: 1, ..Default::default() });
        // F1_1 = 2*1 / (2*1 + 2*1) = 0.5; P_1 = 1 / (1 + 2) ; R_1 = 1
        let (p, r, f) = d.per_class[0].scores();
        assert!((f.unwrap() - 0.5).abs() < 1e-12);
        assert!((p.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r, Some(1.0));
    }

    #[test]
    fn perfect_detection_and_empty_prediction() {
        let gt = [Centroid { pos: (0.0, 0.0), class: 1 }, Centroid { pos: (30.0, 0.0), class: 2 }];
        let s = detection_scores(&gt, &gt, 12.0, 3).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        for c in &s.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (Some(1.0), Some(1.0), Some(1.0)));
        }
        let s = detection_scores(&gt, &[], 12.0, 3).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(detection_scores(&gt, &gt, 0.0, 3).is_err());
    }

    fn fake(id: &str, tissue: u32, pq: f64) -> ImageMetrics {
        ImageMetrics {
            id: id.into(),
            tissue,
            pq: ClassPq { bpq: Some(pq), mpq: Some(pq), ..Default::default() },
            detection: DetectionCounts::default(),
        }
    }

    #[test]
    fn tissue_std_is_population() {
        let imgs = [fake("a", 0, 0.4), fake("b", 1, 0.6)];
        let r = aggregate_report(&imgs, &["bg", "n"], &["x", "y"]).unwrap();
        let m = r.bpq_over_tissues.unwrap();
        assert!((m.mean - 0.5).abs() < 1e-12 && (m.std - 0.1).abs() < 1e-12);
        let swapped = [fake("b", 1, 0.6), fake("a", 0, 0.4)];
        assert_eq!(aggregate_report(&swapped, &["bg", "n"], &["x", "y"]).unwrap(), r);
        assert!(aggregate_report(&[], &[], &[]).is_err());
    }
}
