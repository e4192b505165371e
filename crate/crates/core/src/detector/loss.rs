//! Detection training losses with analytic gradients.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Per-anchor classification target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorTarget {
    /// Foreground of the given class.
    Positive(usize),
    Negative,
    /// Excluded from the classification loss.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Foreground weight; background gets `1 - alpha`. `None` disables balancing.
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

impl FocalParams {
    fn weight(&self, positive: bool) -> f64 {
        match self.alpha {
            Some(a) if positive => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        }
    }
}

fn focal_term(p: f64, positive: bool, params: &FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if positive { p } else { 1.0 - p };
    -params.weight(positive) * (1.0 - pt).powf(params.gamma) * pt.ln()
}

/// d(focal term)/d(logit) at probability `p`; zero inside the clamp region.
fn focal_term_grad(p: f64, positive: bool, params: &FocalParams) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let g = params.gamma;
    let w = params.weight(positive);
    if positive {
        let q = 1.0 - p;
        w * (g * q.powf(g) * p * p.ln() - q.powf(g + 1.0))
    } else {
        let q = 1.0 - p;
        w * (p.powf(g + 1.0) - g * p.powf(g) * q * q.ln())
    }
}

fn positive_count(targets: &[AnchorTarget]) -> usize {
    targets
        .iter()
        .filter(|t| matches!(t, AnchorTarget::Positive(_)))
        .count()
}

/// Sigmoid focal loss over the class columns in `classes`, normalised by the
/// number of positive anchors (at least one).
///
/// `probs` is laid out `[anchor][class]` with `num_classes` columns.
pub fn focal_loss(
    probs: &[f64],
    num_classes: usize,
    targets: &[AnchorTarget],
    classes: Range<usize>,
    params: &FocalParams,
) -> f64 {
    debug_assert_eq!(probs.len(), targets.len() * num_classes);
    let norm = positive_count(targets).max(1) as f64;
    let mut total = 0.0;
    for (n, target) in targets.iter().enumerate() {
        if *target == AnchorTarget::Ignore {
            continue;
        }
        for k in classes.clone() {
            let positive = *target == AnchorTarget::Positive(k);
            total += focal_term(probs[n * num_classes + k], positive, params);
        }
    }
    total / norm
}

/// Focal loss and its gradient with respect to the class logits.
pub fn focal_loss_with_grad(
    logits: &[f64],
    num_classes: usize,
    targets: &[AnchorTarget],
    classes: Range<usize>,
    params: &FocalParams,
) -> (f64, Vec<f64>) {
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let loss = focal_loss(&probs, num_classes, targets, classes.clone(), params);
    let norm = positive_count(targets).max(1) as f64;
    let mut grad = vec![0.0; logits.len()];
    for (n, target) in targets.iter().enumerate() {
        if *target == AnchorTarget::Ignore {
            continue;
        }
        for k in classes.clone() {
            let i = n * num_classes + k;
            let positive = *target == AnchorTarget::Positive(k);
            grad[i] = focal_term_grad(probs[i], positive, params) / norm;
        }
    }
    (loss, grad)
}

/// Smooth-L1 box regression: summed over the four offsets, averaged over the
/// anchors selected by `positive`. Zero without positives.
pub fn regression_loss(pred: &[f64], target: &[f64], positive: &[bool]) -> f64 {
    regression_loss_with_grad(pred, target, positive).0
}

pub fn regression_loss_with_grad(pred: &[f64], target: &[f64], positive: &[bool]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), positive.len() * 4);
    debug_assert_eq!(target.len(), pred.len());
    let count = positive.iter().filter(|&&p| p).count();
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let norm = count as f64;
    let mut total = 0.0;
    for (n, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        for j in 0..4 {
            let d = pred[n * 4 + j] - target[n * 4 + j];
            total += smooth_l1(d);
            grad[n * 4 + j] = smooth_l1_grad(d) / norm;
        }
    }
    (total / norm, grad)
}
