//! VOC-style detection metrics: average precision at an IoU threshold.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::detector::DetectorModel;
use crate::error::Result;
use crate::exec::Exec;
use crate::geometry::{iou, ScoredBox};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<ScoredBox>,
}

/// True/false-positive flags of the class's detections in matching order.
fn match_detections(images: &[ImageResult], class_id: usize, iou_thr: f64) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    let mut num_gt = 0;
    for (i, img) in images.iter().enumerate() {
        num_gt += img.ground_truth.iter().filter(|g| g.class_id == class_id).count();
        for (j, d) in img.detections.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((i, j, d.score));
            }
        }
    }
    // stable sort: equal scores keep image-then-detection order
    dets.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let flags = dets
        .iter()
        .map(|&(i, j, _)| {
            let det = &images[i].detections[j].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in images[i].ground_truth.iter().enumerate() {
                if gt.class_id != class_id {
                    continue;
                }
                let v = iou(det, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= iou_thr && !taken[i][g] => {
                    taken[i][g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, num_gt)
}

/// All-points interpolated AP of one class; `None` when the class has no
/// ground truth.
///
/// Detections are ranked by descending score (ties keep image, then
/// detection order) and greedily matched to the unclaimed ground truth with
/// the highest IoU; a detection whose best ground truth is already claimed
/// is a false positive.
pub fn average_precision(images: &[ImageResult], class_id: usize, iou_thr: f64) -> Option<f64> {
    let (flags, num_gt) = match_detections(images, class_id, iou_thr);
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (n, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (n + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// `None` when the evaluation set has no ground truth for the class.
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over classes with ground truth.
    pub map: f64,
    pub old_mean: Option<f64>,
    pub new_mean: Option<f64>,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    /// Interpolation used for AP.
    pub ap_method: String,
    pub config_hash: String,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn ap_of(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).and_then(|c| c.ap)
    }

    /// Mean AP over the named classes that have ground truth.
    pub fn mean_over(&self, classes: &[String]) -> Option<f64> {
        mean(
            self.per_class
                .iter()
                .filter(|c| classes.contains(&c.class))
                .filter_map(|c| c.ap),
        )
    }

    /// Fills the old/new split given the old classes; the rest count as new.
    pub fn with_split(mut self, old: &[String]) -> Self {
        self.old_mean = mean(self.per_class.iter().filter(|c| old.contains(&c.class)).filter_map(|c| c.ap));
        self.new_mean = mean(self.per_class.iter().filter(|c| !old.contains(&c.class)).filter_map(|c| c.ap));
        self
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>6}\n", "class", "AP", "gt");
        for c in &self.per_class {
            let ap = c.ap.map_or("n/a".to_string(), |v| format!("{:.4}", v));
            out.push_str(&format!("{:<16} {:>8} {:>6}\n", c.class, ap, c.num_gt));
        }
        out.push_str(&format!("{:<16} {:>8.4}\n", "mAP", self.map));
        if let Some(v) = self.old_mean {
            out.push_str(&format!("{:<16} {:>8.4}\n", "old mean", v));
        }
        if let Some(v) = self.new_mean {
            out.push_str(&format!("{:<16} {:>8.4}\n", "new mean", v));
        }
        out
    }
}

/// Per-class AP and mAP from collected per-image results.
pub fn summarize(images: &[ImageResult], classes: &[String], iou_thr: f64) -> (Vec<ClassAp>, f64) {
    let per_class: Vec<ClassAp> = classes
        .iter()
        .enumerate()
        .map(|(k, name)| ClassAp {
            class: name.clone(),
            ap: average_precision(images, k, iou_thr),
            num_gt: images
                .iter()
                .map(|im| im.ground_truth.iter().filter(|g| g.class_id == k).count())
                .sum(),
        })
        .collect();
    let map = mean(per_class.iter().filter_map(|c| c.ap)).unwrap_or(0.0);
    (per_class, map)
}

/// Runs the detector on every image and scores it against the dataset's
/// ground truth. Dataset classes must be known to the model.
pub fn evaluate_model(
    model: &DetectorModel,
    dataset: &Dataset,
    score_thr: f64,
    nms_thr: f64,
    exec: Exec,
) -> Result<EvalReport> {
    let data = dataset.remap_to(&model.labels)?;
    let images: Vec<ImageResult> = exec.map(&data.samples, |s| ImageResult {
        detections: model.detect(&s.image, score_thr, nms_thr),
        ground_truth: s.boxes.clone(),
    });
    let (per_class, map) = summarize(&images, &model.labels, DEFAULT_IOU_THRESHOLD);
    let mut hasher = Sha256::new();
    hasher.update(model.parameter_hash().as_bytes());
    hasher.update(format!("{score_thr:?}/{nms_thr:?}/{}", data.len()).as_bytes());
    Ok(EvalReport {
        scenario: String::new(),
        per_class,
        map,
        old_mean: None,
        new_mean: None,
        score_threshold: score_thr,
        nms_threshold: nms_thr,
        iou_threshold: DEFAULT_IOU_THRESHOLD,
        ap_method: "all_points".into(),
        config_hash: hex::encode(hasher.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn sb(x: f64, score: f64, class: usize) -> ScoredBox {
        ScoredBox::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), class, score)
    }

    #[test]
    fn hand_derived_five_sixths() {
        let img = ImageResult {
            ground_truth: vec![sb(0.0, 1.0, 0), sb(100.0, 1.0, 0)],
            detections: vec![sb(0.0, 0.9, 0), sb(50.0, 0.8, 0), sb(100.0, 0.7, 0)],
        };
        let ap = average_precision(&[img], 0, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_cases() {
        let gt = vec![sb(0.0, 1.0, 0), sb(30.0, 1.0, 0)];
        let perfect = ImageResult {
            ground_truth: gt.clone(),
            detections: vec![sb(0.0, 0.9, 0), sb(30.0, 0.8, 0)],
        };
        assert_eq!(average_precision(&[perfect], 0, 0.5), Some(1.0));
        let none = ImageResult {
            ground_truth: gt,
            detections: vec![],
        };
        assert_eq!(average_precision(&[none.clone()], 0, 0.5), Some(0.0));
        assert_eq!(average_precision(&[none], 1, 0.5), None);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let img = ImageResult {
            ground_truth: vec![sb(0.0, 1.0, 0)],
            detections: vec![sb(0.0, 0.9, 0), sb(1.0, 0.8, 0)],
        };
        assert_eq!(match_detections(&[img], 0, 0.5).0, vec![true, false]);
    }

    #[test]
    fn map_skips_classes_without_ground_truth() {
        let img = ImageResult {
            ground_truth: vec![sb(0.0, 1.0, 0)],
            detections: vec![sb(0.0, 0.9, 0), sb(40.0, 0.9, 1)],
        };
        let (per_class, map) = summarize(&[img], &["a".into(), "b".into()], 0.5);
        assert_eq!(per_class[1].ap, None);
        assert_eq!(map, 1.0);
    }
}
