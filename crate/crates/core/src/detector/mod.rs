//! Toy-scale one-stage anchor-based detector.
//!
//! A strided convolutional feature net produces one feature map per pyramid
//! level; a class subnet and a box subnet, shared across levels, predict `A*K`
//! class logits and `A*4` box offsets per grid cell. Class outputs are
//! independent sigmoids.

mod anchors;
pub mod loss;
pub mod snapshot;

pub use anchors::{decode_offsets, encode_offsets, generate_anchors, Anchor, AnchorConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, ScoredBox};
use crate::tensor::{Conv2d, ConvGrad, Tensor3};
use loss::sigmoid;

/// Initial foreground probability of freshly initialised class outputs.
pub const PRIOR_PROBABILITY: f64 = 0.01;
/// Candidates kept per image before NMS.
pub const PRE_NMS_TOP_N: usize = 300;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Output channels of each stride-2 backbone stage; stage `i` has stride `2^(i+1)`.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    /// Hidden convolutions in each subnet before its output layer.
    pub head_depth: usize,
    pub anchors: AnchorConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: 1,
            backbone_channels: vec![8, 16, 16],
            head_channels: 24,
            head_depth: 1,
            anchors: AnchorConfig::default(),
        }
    }
}

impl ArchConfig {
    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ArchConfig {
            input_channels: 1,
            backbone_channels: vec![3, 4, 4],
            head_channels: 4,
            head_depth: 1,
            anchors: AnchorConfig {
                pyramid_levels: vec![4, 8],
                scales: vec![1.5],
                aspect_ratios: vec![1.0],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.input_channels == 0 || self.head_channels == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let stages = self.level_stages()?;
        let ch = self.backbone_channels[stages[0]];
        if stages.iter().any(|&s| self.backbone_channels[s] != ch) {
            return Err(Error::Config(
                "all pyramid levels must have the same channel count".into(),
            ));
        }
        Ok(())
    }

    /// Backbone stage feeding each pyramid level.
    pub fn level_stages(&self) -> Result<Vec<usize>> {
        self.anchors
            .pyramid_levels
            .iter()
            .map(|&stride| {
                if !stride.is_power_of_two() || stride < 2 {
                    return Err(Error::Config(format!("stride {stride} is not a power of two >= 2")));
                }
                let stage = stride.trailing_zeros() as usize - 1;
                if stage >= self.backbone_channels.len() {
                    return Err(Error::Config(format!(
                        "stride {stride} needs {} backbone stages",
                        stage + 1
                    )));
                }
                Ok(stage)
            })
            .collect()
    }

    fn feature_channels(&self) -> usize {
        let stage = self.level_stages().expect("validated")[0];
        self.backbone_channels[stage]
    }
}

/// Flattened network outputs for one image, anchors in [`generate_anchors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub num_classes: usize,
    /// `[anchor][class]` logits.
    pub class_logits: Vec<f64>,
    /// `[anchor][tx, ty, tw, th]`.
    pub box_offsets: Vec<f64>,
}

impl RawPrediction {
    pub fn anchor_count(&self) -> usize {
        self.box_offsets.len() / 4
    }

    pub fn class_probs(&self) -> Vec<f64> {
        self.class_logits.iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn offsets(&self, anchor: usize) -> &[f64] {
        &self.box_offsets[anchor * 4..anchor * 4 + 4]
    }
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Tensor3,
    stage_outputs: Vec<Tensor3>,
    level_stages: Vec<usize>,
    cls_hidden: Vec<Vec<Tensor3>>,
    box_hidden: Vec<Vec<Tensor3>>,
    cls_maps: Vec<Tensor3>,
    box_maps: Vec<Tensor3>,
    anchors_per_cell: usize,
    num_classes: usize,
}

impl ForwardPass {
    /// Pyramid feature maps, one per level.
    pub fn features(&self) -> Vec<&Tensor3> {
        self.level_stages.iter().map(|&s| &self.stage_outputs[s]).collect()
    }

    /// Deepest pyramid feature map.
    pub fn deepest_features(&self) -> &Tensor3 {
        &self.stage_outputs[*self.level_stages.last().expect("at least one level")]
    }

    pub fn raw(&self) -> RawPrediction {
        let a = self.anchors_per_cell;
        let k = self.num_classes;
        let mut class_logits = Vec::new();
        let mut box_offsets = Vec::new();
        for (cm, bm) in self.cls_maps.iter().zip(&self.box_maps) {
            for y in 0..cm.height {
                for x in 0..cm.width {
                    for slot in 0..a {
                        for c in 0..k {
                            class_logits.push(cm.at(slot * k + c, y, x));
                        }
                        for j in 0..4 {
                            box_offsets.push(bm.at(slot * 4 + j, y, x));
                        }
                    }
                }
            }
        }
        RawPrediction {
            num_classes: k,
            class_logits,
            box_offsets,
        }
    }

    /// Scatters flattened per-anchor gradients back onto per-level maps.
    fn unflatten(&self, flat: &[f64], per_anchor: usize, maps: &[Tensor3]) -> Vec<Tensor3> {
        let a = self.anchors_per_cell;
        let mut out: Vec<Tensor3> = maps
            .iter()
            .map(|m| Tensor3::zeros(m.channels, m.height, m.width))
            .collect();
        let mut n = 0;
        for m in &mut out {
            for y in 0..m.height {
                for x in 0..m.width {
                    for slot in 0..a {
                        for c in 0..per_anchor {
                            let idx = m.idx(slot * per_anchor + c, y, x);
                            m.data[idx] = flat[n * per_anchor + c];
                        }
                        n += 1;
                    }
                }
            }
        }
        out
    }
}

/// Gradients flowing into the network outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    /// `[anchor][class]`, empty for none.
    pub class_logits: Vec<f64>,
    /// `[anchor][4]`, empty for none.
    pub box_offsets: Vec<f64>,
    /// Per pyramid level, empty for none.
    pub features: Vec<Tensor3>,
}

/// Parameter gradients, one entry per convolution in [`DetectorModel::convs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Gradients {
            convs: model.convs().iter().map(|c| ConvGrad::zeros_like(c)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.convs {
            g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// Flattened in the same order as [`DetectorModel::flat_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.convs
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// The detector: feature net, class subnet and box subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub arch: ArchConfig,
    pub labels: Vec<String>,
    backbone: Vec<Conv2d>,
    cls_hidden: Vec<Conv2d>,
    cls_out: Conv2d,
    box_hidden: Vec<Conv2d>,
    box_out: Conv2d,
}

fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln()
}

impl DetectorModel {
    pub fn new<R: Rng>(arch: ArchConfig, labels: Vec<String>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if labels.is_empty() {
            return Err(Error::Vocabulary("a detector needs at least one class".into()));
        }
        let a = arch.anchors.anchors_per_cell();
        let k = labels.len();
        let mut backbone = Vec::new();
        let mut c_in = arch.input_channels;
        for &c_out in &arch.backbone_channels {
            backbone.push(Conv2d::he_init(c_in, c_out, 3, 2, rng));
            c_in = c_out;
        }
        let feat = arch.feature_channels();
        let tower = |rng: &mut R| {
            let mut layers = Vec::new();
            let mut c = feat;
            for _ in 0..arch.head_depth {
                layers.push(Conv2d::he_init(c, arch.head_channels, 3, 1, rng));
                c = arch.head_channels;
            }
            layers
        };
        let cls_hidden = tower(rng);
        let box_hidden = tower(rng);
        let head_in = if arch.head_depth > 0 { arch.head_channels } else { feat };
        let cls_out = Conv2d::normal_init(head_in, a * k, 3, 1, 0.01, prior_bias(), rng);
        let box_out = Conv2d::normal_init(head_in, a * 4, 3, 1, 0.01, 0.0, rng);
        Ok(DetectorModel {
            arch,
            labels,
            backbone,
            cls_hidden,
            cls_out,
            box_hidden,
            box_out,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// All convolutions in a fixed order: backbone, class subnet, box subnet.
    pub fn convs(&self) -> Vec<&Conv2d> {
        self.backbone
            .iter()
            .chain(&self.cls_hidden)
            .chain(std::iter::once(&self.cls_out))
            .chain(&self.box_hidden)
            .chain(std::iter::once(&self.box_out))
            .collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.backbone
            .iter_mut()
            .chain(self.cls_hidden.iter_mut())
            .chain(std::iter::once(&mut self.cls_out))
            .chain(self.box_hidden.iter_mut())
            .chain(std::iter::once(&mut self.box_out))
            .collect()
    }

    /// Parameter array names, weight then bias for each convolution.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut push = |prefix: String| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        };
        for i in 0..self.backbone.len() {
            push(format!("backbone.{i}"));
        }
        for i in 0..self.cls_hidden.len() {
            push(format!("class_subnet.hidden.{i}"));
        }
        push("class_subnet.out".into());
        for i in 0..self.box_hidden.len() {
            push(format!("box_subnet.hidden.{i}"));
        }
        push("box_subnet.out".into());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().iter().map(|c| c.parameter_count()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.convs()
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameter values for a model with {}",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut it = values.iter();
        for conv in self.convs_mut() {
            for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// SHA-256 over the raw little-endian parameter bytes.
    pub fn parameter_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.flat_parameters() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn anchors(&self, image_w: usize, image_h: usize) -> Vec<Anchor> {
        generate_anchors(&self.arch.anchors, image_w, image_h)
    }

    /// Runs the network, keeping what backpropagation needs.
    pub fn forward(&self, image: &Tensor3) -> ForwardPass {
        assert_eq!(image.channels, self.arch.input_channels, "input channel mismatch");
        let mut input = image.clone();
        // inputs in [0, 1] are centred to [-1, 1]
        input.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let mut stage_outputs: Vec<Tensor3> = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let mut out = conv.forward(stage_outputs.last().unwrap_or(&input));
            out.relu_inplace();
            stage_outputs.push(out);
        }
        let level_stages = self.arch.level_stages().expect("validated at construction");
        let run_tower = |hidden: &[Conv2d], out_conv: &Conv2d, feat: &Tensor3| {
            let mut acts = Vec::with_capacity(hidden.len());
            for conv in hidden {
                let mut h = conv.forward(acts.last().unwrap_or(feat));
                h.relu_inplace();
                acts.push(h);
            }
            let out = out_conv.forward(acts.last().unwrap_or(feat));
            (acts, out)
        };
        let mut cls_hidden = Vec::new();
        let mut box_hidden = Vec::new();
        let mut cls_maps = Vec::new();
        let mut box_maps = Vec::new();
        for &s in &level_stages {
            let feat = &stage_outputs[s];
            let (ch, cm) = run_tower(&self.cls_hidden, &self.cls_out, feat);
            let (bh, bm) = run_tower(&self.box_hidden, &self.box_out, feat);
            cls_hidden.push(ch);
            cls_maps.push(cm);
            box_hidden.push(bh);
            box_maps.push(bm);
        }
        ForwardPass {
            input,
            stage_outputs,
            level_stages,
            cls_hidden,
            box_hidden,
            cls_maps,
            box_maps,
            anchors_per_cell: self.arch.anchors.anchors_per_cell(),
            num_classes: self.num_classes(),
        }
    }

    pub fn predict(&self, image: &Tensor3) -> RawPrediction {
        self.forward(image).raw()
    }

    /// Backpropagates output gradients to parameter gradients.
    pub fn backward(&self, pass: &ForwardPass, grads: &OutputGrads) -> Gradients {
        let mut out = Gradients::zeros_like(self);
        let nb = self.backbone.len();
        let nh = self.cls_hidden.len();
        let cls_out_idx = nb + nh;
        let box_hidden_start = cls_out_idx + 1;
        let box_out_idx = box_hidden_start + self.box_hidden.len();

        let levels = pass.level_stages.len();
        let mut feat_grads: Vec<Tensor3> = pass
            .features()
            .iter()
            .map(|f| Tensor3::zeros(f.channels, f.height, f.width))
            .collect();
        if !grads.features.is_empty() {
            for (fg, g) in feat_grads.iter_mut().zip(&grads.features) {
                fg.add_assign(g);
            }
        }

        let subnet = |flat: &[f64],
                          per_anchor: usize,
                          maps: &[Tensor3],
                          hidden_acts: &[Vec<Tensor3>],
                          hidden: &[Conv2d],
                          out_conv: &Conv2d,
                          hidden_start: usize,
                          out_idx: usize,
                          out: &mut Gradients,
                          feat_grads: &mut [Tensor3]| {
            if flat.is_empty() {
                return;
            }
            let map_grads = pass.unflatten(flat, per_anchor, maps);
            for l in 0..levels {
                let feat = pass.features()[l];
                let acts = &hidden_acts[l];
                let top_in = acts.last().unwrap_or(feat);
                let mut g = out_conv
                    .backward(top_in, &map_grads[l], &mut out.convs[out_idx], true)
                    .expect("input grad requested");
                for (j, conv) in hidden.iter().enumerate().rev() {
                    Tensor3::relu_backward(&acts[j], &mut g);
                    let layer_in = if j == 0 { feat } else { &acts[j - 1] };
                    g = conv
                        .backward(layer_in, &g, &mut out.convs[hidden_start + j], true)
                        .expect("input grad requested");
                }
                feat_grads[l].add_assign(&g);
            }
        };
        subnet(
            &grads.class_logits,
            self.num_classes(),
            &pass.cls_maps,
            &pass.cls_hidden,
            &self.cls_hidden,
            &self.cls_out,
            nb,
            cls_out_idx,
            &mut out,
            &mut feat_grads,
        );
        subnet(
            &grads.box_offsets,
            4,
            &pass.box_maps,
            &pass.box_hidden,
            &self.box_hidden,
            &self.box_out,
            box_hidden_start,
            box_out_idx,
            &mut out,
            &mut feat_grads,
        );

        // backbone, deepest stage first
        let mut stage_grads: Vec<Option<Tensor3>> = vec![None; nb];
        for (l, &s) in pass.level_stages.iter().enumerate() {
            let fg = std::mem::replace(&mut feat_grads[l], Tensor3::zeros(0, 0, 0));
            match stage_grads[s].as_mut() {
                Some(existing) => existing.add_assign(&fg),
                None => stage_grads[s] = Some(fg),
            }
        }
        for s in (0..nb).rev() {
            let Some(mut g) = stage_grads[s].take() else {
                continue;
            };
            Tensor3::relu_backward(&pass.stage_outputs[s], &mut g);
            let input = if s == 0 { &pass.input } else { &pass.stage_outputs[s - 1] };
            let gi = self.backbone[s].backward(input, &g, &mut out.convs[s], s > 0);
            if let Some(gi) = gi {
                match stage_grads[s - 1].as_mut() {
                    Some(existing) => existing.add_assign(&gi),
                    None => stage_grads[s - 1] = Some(gi),
                }
            }
        }
        out
    }

    /// Appends `new_labels` to the class subnet output.
    ///
    /// Every parameter outside the appended output channels is copied, so the
    /// first `K` class outputs are unchanged on every input. Appended channels
    /// get small random weights and the prior-probability bias.
    pub fn expand_class_head<R: Rng>(&self, new_labels: &[String], rng: &mut R) -> Result<DetectorModel> {
        if new_labels.is_empty() {
            return Err(Error::Vocabulary("expansion needs at least one new class".into()));
        }
        for name in new_labels {
            if self.labels.contains(name) || new_labels.iter().filter(|n| *n == name).count() > 1 {
                return Err(Error::Vocabulary(format!("class name '{name}' already present")));
            }
        }
        let a = self.arch.anchors.anchors_per_cell();
        let k = self.num_classes();
        let k_new = k + new_labels.len();
        let old = &self.cls_out;
        let fresh = Conv2d::normal_init(old.in_channels, a * k_new, old.kernel, 1, 0.01, prior_bias(), rng);
        let per_out = old.in_channels * old.kernel * old.kernel;
        let mut out = fresh.clone();
        for slot in 0..a {
            for c in 0..k {
                let src = slot * k + c;
                let dst = slot * k_new + c;
                out.weight[dst * per_out..(dst + 1) * per_out]
                    .copy_from_slice(&old.weight[src * per_out..(src + 1) * per_out]);
                out.bias[dst] = old.bias[src];
            }
        }
        let mut model = self.clone();
        model.cls_out = out;
        model.labels.extend(new_labels.iter().cloned());
        Ok(model)
    }

    /// Score-thresholded candidates before NMS, optionally capped by score.
    pub fn candidates(&self, image: &Tensor3, score_thr: f64, cap: Option<usize>) -> Vec<ScoredBox> {
        let raw = self.predict(image);
        let anchors = self.anchors(image.width, image.height);
        decode_candidates(&raw, &anchors, image.width, image.height, score_thr, cap)
    }

    /// Decodes confident anchors (score at least `score_thr`) and applies class-wise NMS.
    pub fn detect(&self, image: &Tensor3, score_thr: f64, nms_thr: f64) -> Vec<ScoredBox> {
        let raw = self.predict(image);
        let anchors = self.anchors(image.width, image.height);
        decode_detections(&raw, &anchors, image.width, image.height, score_thr, nms_thr)
    }
}

/// Anchor/class pairs with probability at least `score_thr`, decoded and clipped,
/// highest score first (ties by anchor then class index).
pub fn decode_candidates(
    raw: &RawPrediction,
    anchors: &[Anchor],
    image_w: usize,
    image_h: usize,
    score_thr: f64,
    cap: Option<usize>,
) -> Vec<ScoredBox> {
    let k = raw.num_classes;
    let mut hits: Vec<(usize, usize, f64)> = Vec::new();
    for (n, row) in raw.class_logits.chunks(k).enumerate() {
        for (c, &logit) in row.iter().enumerate() {
            let p = sigmoid(logit);
            if p >= score_thr {
                hits.push((n, c, p));
            }
        }
    }
    hits.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    if let Some(cap) = cap {
        hits.truncate(cap);
    }
    let (w, h) = (image_w as f64, image_h as f64);
    hits.into_iter()
        .map(|(n, c, p)| {
            let bbox = decode_offsets(raw.offsets(n), &anchors[n].bbox).clip(w, h);
            ScoredBox::new(bbox, c, p)
        })
        .collect()
}

/// Thresholding, top-N capping and class-wise NMS over raw outputs.
pub fn decode_detections(
    raw: &RawPrediction,
    anchors: &[Anchor],
    image_w: usize,
    image_h: usize,
    score_thr: f64,
    nms_thr: f64,
) -> Vec<ScoredBox> {
    let cands = decode_candidates(raw, anchors, image_w, image_h, score_thr, Some(PRE_NMS_TOP_N));
    nms(&cands, nms_thr)
        .into_iter()
        .filter(|d| d.bbox.area() > 0.0)
        .collect()
}

/// Grid cell containing a box centre, for hand-built tests.
pub fn cell_of(b: &BBox, stride: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    ((cy / stride as f64) as usize, (cx / stride as f64) as usize)
}
