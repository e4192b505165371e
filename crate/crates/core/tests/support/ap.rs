//! Exhaustive AP oracle and random detection instances.

use incdet_core::eval::ImageResult;
use incdet_core::geometry::{iou, BBox, ScoredBox};
use rand::Rng;

/// Precision and recall of the top `n` detections, matched from scratch.
fn pr_at(images: &[ImageResult], class: usize, n: usize, thr: f64) -> (f64, f64) {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (j, d) in im.detections.iter().enumerate() {
            if d.class_id == class {
                dets.push((d.score, i, j));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total: usize = images.iter().map(|im| im.ground_truth.iter().filter(|g| g.class_id == class).count()).sum();
    let mut claimed = std::collections::HashSet::new();
    let mut tp = 0;
    for &(_, i, j) in dets.iter().take(n) {
        let d = &images[i].detections[j];
        let best = images[i]
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == class)
            .map(|(g, gt)| (g, iou(&d.bbox, &gt.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((g, v)) = best {
            if v >= thr && claimed.insert((i, g)) {
                tp += 1;
            }
        }
    }
    (tp as f64 / n.max(1) as f64, tp as f64 / total as f64)
}

/// Area under the interpolated curve, one step per ground-truth box: the
/// step to recall k/G is weighted by the best precision at any cutoff
/// reaching that recall.
pub fn oracle_ap(images: &[ImageResult], class: usize, thr: f64) -> Option<f64> {
    let total: usize = images.iter().map(|im| im.ground_truth.iter().filter(|g| g.class_id == class).count()).sum();
    if total == 0 {
        return None;
    }
    let n_det: usize = images.iter().map(|im| im.detections.iter().filter(|d| d.class_id == class).count()).sum();
    let curve: Vec<(f64, f64)> = (1..=n_det).map(|n| pr_at(images, class, n, thr)).collect();
    let mut ap = 0.0;
    for k in 1..=total {
        let level = k as f64 / total as f64;
        let best = curve
            .iter()
            .filter(|(_, r)| *r >= level - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        ap += best / total as f64;
    }
    Some(ap)
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let x = rng.gen_range(0.0..40.0f64).round();
    let y = rng.gen_range(0.0..40.0f64).round();
    let w = rng.gen_range(4.0..20.0f64).round();
    let h = rng.gen_range(4.0..20.0f64).round();
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn random_instance(rng: &mut impl Rng) -> Vec<ImageResult> {
    let n_images = rng.gen_range(1..=3);
    let mut budget = 10;
    (0..n_images)
        .map(|_| {
            let n_gt = rng.gen_range(0..=budget.min(4));
            budget -= n_gt;
            let ground_truth: Vec<ScoredBox> =
                (0..n_gt).map(|_| ScoredBox::ground_truth(random_box(rng), rng.gen_range(0..3))).collect();
            let n_det = rng.gen_range(0..=6);
            let detections = (0..n_det)
                .map(|_| {
                    // half the detections are jittered copies of ground truth
                    let bbox = match ground_truth.get(rng.gen_range(0..ground_truth.len().max(1) * 2)) {
                        Some(g) => {
                            let d = rng.gen_range(-3.0..3.0f64).round();
                            BBox::new(g.bbox.x_min + d, g.bbox.y_min, g.bbox.x_max + d, g.bbox.y_max).unwrap()
                        }
                        None => random_box(rng),
                    };
                    // coarse scores so ties occur
                    ScoredBox::new(bbox, rng.gen_range(0..3), f64::from(rng.gen_range(1..=8u8)) / 8.0)
                })
                .collect();
            ImageResult { detections, ground_truth }
        })
        .collect()
}

fn sb(x: f64, score: f64) -> ScoredBox {
    ScoredBox::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), 0, score)
}

/// Two ground-truth boxes; detections hit, miss, hit in score order, so
/// precision steps 1, 1/2, 2/3 and the interpolated area is 1/2 + 1/3.
pub fn five_sixths_instance() -> Vec<ImageResult> {
    vec![ImageResult {
        ground_truth: vec![sb(0.0, 1.0), sb(100.0, 1.0)],
        detections: vec![sb(0.0, 0.9), sb(50.0, 0.8), sb(100.0, 0.7)],
    }]
}
