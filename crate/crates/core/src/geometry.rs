//! Boxes, overlap measures, non-maximum suppression and anchor matching.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// A box tagged with a class index and a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Self {
        ScoredBox { bbox, class_id, score }
    }

    /// A ground-truth annotation: score fixed at 1.
    pub fn ground_truth(bbox: BBox, class_id: usize) -> Self {
        ScoredBox { bbox, class_id, score: 1.0 }
    }
}

/// Rejects zero-area ground truth at ingestion.
pub fn validate_ground_truth(gt: &ScoredBox) -> Result<()> {
    if !gt.bbox.is_valid() || gt.bbox.area() <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "degenerate ground-truth box {:?}",
            gt.bbox
        )));
    }
    Ok(())
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over the prediction's area.
pub fn iop(gth: &BBox, prd: &BBox) -> Result<f64> {
    let area = prd.area();
    if area <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "intersection over prediction undefined for zero-area prediction {prd:?}"
        )));
    }
    Ok((gth.intersection_area(prd) / area).clamp(0.0, 1.0))
}

/// Descending score, ties resolved by original position.
pub(crate) fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy class-wise non-maximum suppression.
///
/// Boxes are visited by descending score; a box is dropped when it overlaps an
/// already kept box of the same class with IoU above `iou_threshold`. The
/// output is sorted by descending score.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let order = score_order(boxes);
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let candidate = &boxes[i];
        let suppressed = kept.iter().any(|k| {
            k.class_id == candidate.class_id && iou(&k.bbox, &candidate.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

/// Training-target assignment of a single anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorAssignment {
    Positive(usize),
    Negative,
    Ignore,
}

/// Assigns each anchor to its best-overlapping ground truth.
///
/// An anchor is positive iff its max IoU is at least `pos_thr` (ties go to the
/// lowest gt index), negative iff below `neg_thr`, and ignored otherwise.
pub fn match_anchors(
    anchors: &[BBox],
    gt: &[ScoredBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<Vec<AnchorAssignment>> {
    if pos_thr < neg_thr {
        return Err(Error::Config(format!(
            "positive threshold {pos_thr} below negative threshold {neg_thr}"
        )));
    }
    Ok(anchors
        .iter()
        .map(|anchor| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt_box) in gt.iter().enumerate() {
                let v = iou(anchor, &gt_box.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                None => AnchorAssignment::Negative,
                Some((g, v)) if v >= pos_thr => AnchorAssignment::Positive(g),
                Some((_, v)) if v < neg_thr => AnchorAssignment::Negative,
                Some(_) => AnchorAssignment::Ignore,
            }
        })
        .collect())
}
