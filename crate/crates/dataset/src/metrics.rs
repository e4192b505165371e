//! Quality of a constructed dataset against known ground truth.

use std::collections::BTreeMap;

use incdet_core::geometry::{iop, iou, BBox};
use serde::{Deserialize, Serialize};

use crate::manifest::DatasetManifest;

pub const MATCH_IOU: f64 = 0.5;
pub const INSIDE_IOP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructionScore {
    /// Percentage of ground-truth images whose every ground-truth box is
    /// matched by a manifest box at IoU >= 0.5.
    pub retention_rate: f64,
    /// Percentage of manifest boxes whose best intersection over prediction
    /// with the image's ground truth is below 0.5.
    pub fp_rate: f64,
    pub gt_images: usize,
    pub retained_images: usize,
    pub manifest_boxes: usize,
    pub false_positives: usize,
    /// Set when the manifest has no boxes, so `fp_rate` is not meaningful.
    pub fp_undefined: bool,
}

/// Scores a manifest against ground-truth boxes keyed by image path. Images
/// with no ground-truth entry count every manifest box as a false positive.
pub fn score_construction(manifest: &DatasetManifest, ground_truth: &BTreeMap<String, Vec<BBox>>) -> ConstructionScore {
    let predicted: BTreeMap<&str, Vec<BBox>> = manifest
        .images
        .iter()
        .map(|img| (img.path.as_str(), img.boxes.iter().map(|b| b.bbox()).collect()))
        .collect();

    let mut gt_images = 0;
    let mut retained = 0;
    for (path, gts) in ground_truth.iter().filter(|(_, g)| !g.is_empty()) {
        gt_images += 1;
        let Some(pred) = predicted.get(path.as_str()) else { continue };
        if gts.iter().all(|g| pred.iter().any(|p| iou(g, p) >= MATCH_IOU)) {
            retained += 1;
        }
    }

    let mut boxes = 0;
    let mut fps = 0;
    for (path, pred) in &predicted {
        let gts = ground_truth.get(*path).map(Vec::as_slice).unwrap_or(&[]);
        for p in pred {
            boxes += 1;
            let best = gts.iter().filter_map(|g| iop(g, p).ok()).fold(0.0, f64::max);
            if best < INSIDE_IOP {
                fps += 1;
            }
        }
    }

    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    ConstructionScore {
        retention_rate: pct(retained, gt_images),
        fp_rate: pct(fps, boxes),
        gt_images,
        retained_images: retained,
        manifest_boxes: boxes,
        false_positives: fps,
        fp_undefined: boxes == 0,
    }
}
