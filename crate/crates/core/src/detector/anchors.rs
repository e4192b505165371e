use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Anchor layout over a set of pyramid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Stride in pixels of each pyramid level, strictly increasing.
    pub pyramid_levels: Vec<usize>,
    /// Anchor side as a multiple of the level stride.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            pyramid_levels: vec![4, 8],
            scales: vec![4.0],
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels.is_empty() || self.pyramid_levels.contains(&0) {
            return Err(Error::Config("pyramid strides must be positive".into()));
        }
        if self.pyramid_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("pyramid strides must be strictly increasing".into()));
        }
        if self.anchors_per_cell() == 0 {
            return Err(Error::Config("at least one scale and one aspect ratio required".into()));
        }
        if self
            .scales
            .iter()
            .chain(&self.aspect_ratios)
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::Config("scales and aspect ratios must be positive".into()));
        }
        Ok(())
    }

    /// `A`: anchors per grid cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    /// Grid `(rows, cols)` of each level for an image size.
    pub fn grid_sizes(&self, image_w: usize, image_h: usize) -> Vec<(usize, usize)> {
        self.pyramid_levels
            .iter()
            .map(|&s| (image_h.div_ceil(s), image_w.div_ceil(s)))
            .collect()
    }

    pub fn anchor_count(&self, image_w: usize, image_h: usize) -> usize {
        self.grid_sizes(image_w, image_h)
            .iter()
            .map(|(r, c)| r * c)
            .sum::<usize>()
            * self.anchors_per_cell()
    }
}

/// One anchor box with its position in the prediction grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub slot: usize,
}

/// Anchors ordered level-major, then row-major, slot-minor.
pub fn generate_anchors(cfg: &AnchorConfig, image_w: usize, image_h: usize) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(cfg.anchor_count(image_w, image_h));
    for (level, (&stride, (rows, cols))) in cfg
        .pyramid_levels
        .iter()
        .zip(cfg.grid_sizes(image_w, image_h))
        .enumerate()
    {
        let stride = stride as f64;
        for row in 0..rows {
            for col in 0..cols {
                let cx = (col as f64 + 0.5) * stride;
                let cy = (row as f64 + 0.5) * stride;
                let mut slot = 0;
                for &scale in &cfg.scales {
                    for &ratio in &cfg.aspect_ratios {
                        let side = scale * stride;
                        let w = side / ratio.sqrt();
                        let h = side * ratio.sqrt();
                        out.push(Anchor {
                            bbox: BBox::from_center(cx, cy, w, h),
                            level,
                            row,
                            col,
                            slot,
                        });
                        slot += 1;
                    }
                }
            }
        }
    }
    out
}

/// Regression target of `gt` relative to `anchor`: `(tx, ty, tw, th)`.
pub fn encode_offsets(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::InvalidBox(format!("anchor without area {anchor:?}")));
    }
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::InvalidBox(format!("ground truth without area {gt:?}")));
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    Ok([
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`encode_offsets`]. Log-size offsets are clamped to avoid overflow.
pub fn decode_offsets(offsets: &[f64], anchor: &BBox) -> BBox {
    const MAX_LOG_SCALE: f64 = 8.0;
    let (ax, ay) = anchor.center();
    let cx = ax + offsets[0] * anchor.width();
    let cy = ay + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.height() * offsets[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}
