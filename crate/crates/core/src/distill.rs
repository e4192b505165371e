//! Distillation-based incremental training.
//!
//! A frozen copy of the old model (the teacher) supervises an expanded
//! student on new-class data. The objective per image is
//!
//! ```text
//! focal + l1 * regression + l2 * class_distill + l3 * box_distill + l4 * feature_distill
//! ```
//!
//! and batches average it over images. Old-class outputs are matched to the
//! teacher's probabilities, the teacher's top-k most confident anchors anchor
//! the box outputs, and pyramid features are kept close to the teacher's.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Sample};
use crate::detector::loss::{
    focal_loss_with_grad, regression_loss_with_grad, sigmoid, smooth_l1, smooth_l1_grad, AnchorTarget,
    FocalParams,
};
use crate::detector::{encode_offsets, Anchor, DetectorModel, ForwardPass, Gradients, OutputGrads, RawPrediction};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::exemplar::merge_with_new_data;
use crate::geometry::{match_anchors, AnchorAssignment, BBox};
use crate::optim::Adam;
use crate::tensor::Tensor3;

/// Which class columns the focal term supervises on new-class images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalScope {
    /// Only the appended classes; old columns are left to distillation.
    NewClasses,
    /// Every class, as in ordinary detector training.
    AllClasses,
}

/// Anchors covered by the classification distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDistillAnchors {
    All,
    /// Only anchors whose best teacher old-class probability reaches `min_score`.
    TeacherConfident { min_score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Teacher boxes per image used by the box distillation term.
    pub k_box: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Pyramid levels covered by feature distillation; `None` means all.
    pub feature_levels: Option<Vec<usize>>,
    pub focal: FocalParams,
    pub focal_scope: FocalScope,
    pub class_distill_anchors: ClassDistillAnchors,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            k_box: 64,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            feature_levels: None,
            focal: FocalParams::default(),
            focal_scope: FocalScope::NewClasses,
            class_distill_anchors: ClassDistillAnchors::All,
            positive_iou: 0.5,
            negative_iou: 0.4,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

impl DistillConfig {
    /// Ordinary detector training: no distillation, focal loss over every class.
    pub fn fine_tuning() -> Self {
        DistillConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            focal_scope: FocalScope::AllClasses,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.k_box == 0 {
            return Err(Error::Config("k_box must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.positive_iou < self.negative_iou {
            return Err(Error::Config("positive IoU threshold below negative threshold".into()));
        }
        Ok(())
    }

    fn uses_teacher(&self) -> bool {
        self.lambda2 > 0.0 || self.lambda3 > 0.0 || self.lambda4 > 0.0
    }
}

/// Immutable snapshot of the pre-expansion model.
#[derive(Debug, Clone)]
pub struct FrozenTeacher {
    model: Arc<DetectorModel>,
}

/// Teacher outputs needed by the distillation terms for one image.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub probs: Vec<f64>,
    pub raw: RawPrediction,
    pub features: Vec<Tensor3>,
}

impl FrozenTeacher {
    pub fn new(model: DetectorModel) -> Self {
        FrozenTeacher { model: Arc::new(model) }
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    /// Number of old classes `m`.
    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn outputs(&self, image: &Tensor3) -> TeacherOutputs {
        let pass = self.model.forward(image);
        let raw = pass.raw();
        TeacherOutputs {
            probs: raw.class_probs(),
            features: pass.features().into_iter().cloned().collect(),
            raw,
        }
    }
}

/// Mean over anchors of `(1/m) * sum_i (teacher_i - student_i)^2`.
///
/// Both inputs are `[anchor][m]` probabilities over the old classes.
pub fn class_distill_loss(teacher_probs: &[f64], student_probs: &[f64], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Vocabulary(
            "classification distillation needs at least one old class".into(),
        ));
    }
    if teacher_probs.len() != student_probs.len() || teacher_probs.len() % m != 0 {
        return Err(Error::Shape("teacher and student probabilities differ in shape".into()));
    }
    let anchors = teacher_probs.len() / m;
    if anchors == 0 {
        return Ok(0.0);
    }
    let sum: f64 = teacher_probs
        .iter()
        .zip(student_probs)
        .map(|(t, s)| (t - s) * (t - s))
        .sum();
    Ok(sum / (m as f64 * anchors as f64))
}

/// Classification distillation on the first `m` of the student's `k` logit
/// columns, restricted to `mask` anchors; returns loss and logit gradient.
fn class_distill_with_grad(
    teacher_probs: &[f64],
    m: usize,
    student_logits: &[f64],
    k: usize,
    mask: Option<&[bool]>,
) -> (f64, Vec<f64>) {
    let anchors = student_logits.len() / k;
    let selected: Vec<usize> = (0..anchors)
        .filter(|&n| mask.is_none_or(|mk| mk[n]))
        .collect();
    let mut grad = vec![0.0; student_logits.len()];
    if selected.is_empty() || m == 0 {
        return (0.0, grad);
    }
    let norm = (m * selected.len()) as f64;
    let mut loss = 0.0;
    for &n in &selected {
        for i in 0..m {
            let p = sigmoid(student_logits[n * k + i]);
            let t = teacher_probs[n * m + i];
            loss += (t - p) * (t - p);
            grad[n * k + i] = -2.0 * (t - p) * p * (1.0 - p) / norm;
        }
    }
    (loss / norm, grad)
}

/// A teacher anchor chosen for box distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherBox {
    pub anchor: usize,
    pub offsets: [f64; 4],
    pub score: f64,
}

/// The `k_box` anchors with the highest teacher confidence (max over old
/// classes), ties broken by lower anchor index.
pub fn select_teacher_boxes(teacher: &RawPrediction, k_box: usize) -> Vec<TeacherBox> {
    let m = teacher.num_classes;
    let mut scored: Vec<(usize, f64)> = teacher
        .class_logits
        .chunks(m)
        .map(|row| row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x)))
        .enumerate()
        .collect();
    // sigmoid is monotone, so ranking logits ranks probabilities
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k_box)
        .map(|(anchor, logit)| {
            let o = teacher.offsets(anchor);
            TeacherBox {
                anchor,
                offsets: [o[0], o[1], o[2], o[3]],
                score: sigmoid(logit),
            }
        })
        .collect()
}

/// Smooth-L1 over the four offsets, averaged over the selected anchors.
pub fn box_distill_loss(selection: &[TeacherBox], student_offsets: &[f64]) -> f64 {
    box_distill_with_grad(selection, student_offsets).0
}

fn box_distill_with_grad(selection: &[TeacherBox], student_offsets: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; student_offsets.len()];
    if selection.is_empty() {
        return (0.0, grad);
    }
    let norm = selection.len() as f64;
    let mut loss = 0.0;
    for sel in selection {
        for j in 0..4 {
            let d = student_offsets[sel.anchor * 4 + j] - sel.offsets[j];
            loss += smooth_l1(d);
            grad[sel.anchor * 4 + j] += smooth_l1_grad(d) / norm;
        }
    }
    (loss / norm, grad)
}

fn feature_levels(levels: Option<&[usize]>, available: usize) -> Result<Vec<usize>> {
    match levels {
        None => Ok((0..available).collect()),
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|&&l| l >= available) {
                return Err(Error::Config(format!(
                    "feature level {bad} outside {available} pyramid levels"
                )));
            }
            Ok(ls.to_vec())
        }
    }
}

/// Sum over levels of the element-mean smooth-L1 between feature maps.
pub fn feature_distill_loss(teacher: &[&Tensor3], student: &[&Tensor3], levels: Option<&[usize]>) -> Result<f64> {
    Ok(feature_distill_with_grad(teacher, student, levels)?.0)
}

fn feature_distill_with_grad(
    teacher: &[&Tensor3],
    student: &[&Tensor3],
    levels: Option<&[usize]>,
) -> Result<(f64, Vec<Tensor3>)> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "{} teacher levels vs {} student levels",
            teacher.len(),
            student.len()
        )));
    }
    let levels = feature_levels(levels, teacher.len())?;
    let mut grads: Vec<Tensor3> = student
        .iter()
        .map(|s| Tensor3::zeros(s.channels, s.height, s.width))
        .collect();
    let mut total = 0.0;
    for l in levels {
        let (t, s) = (teacher[l], student[l]);
        if !t.same_shape(s) {
            return Err(Error::Shape(format!("feature level {l} differs between teacher and student")));
        }
        if s.is_empty() {
            continue;
        }
        let norm = s.len() as f64;
        let mut level = 0.0;
        for (i, (tv, sv)) in t.data.iter().zip(&s.data).enumerate() {
            let d = sv - tv;
            level += smooth_l1(d);
            grads[l].data[i] = smooth_l1_grad(d) / norm;
        }
        total += level / norm;
    }
    Ok((total, grads))
}

/// The five weighted components and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub regression: f64,
    pub class_distill: f64,
    pub box_distill: f64,
    pub feature_distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.focal += o.focal;
        self.regression += o.regression;
        self.class_distill += o.class_distill;
        self.box_distill += o.box_distill;
        self.feature_distill += o.feature_distill;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.focal *= s;
        self.regression *= s;
        self.class_distill *= s;
        self.box_distill *= s;
        self.feature_distill *= s;
        self.total *= s;
        self
    }

    /// Recombines the components with the configured weights.
    pub fn weighted_sum(&self, cfg: &DistillConfig) -> f64 {
        self.focal
            + cfg.lambda1 * self.regression
            + cfg.lambda2 * self.class_distill
            + cfg.lambda3 * self.box_distill
            + cfg.lambda4 * self.feature_distill
    }
}

/// Classification and regression targets of one image.
#[derive(Debug, Clone)]
pub struct Targets {
    pub classes: Vec<AnchorTarget>,
    pub offsets: Vec<f64>,
    pub positive: Vec<bool>,
}

pub fn build_targets(anchors: &[Anchor], sample: &Sample, pos_iou: f64, neg_iou: f64) -> Result<Targets> {
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
    let assignment = match_anchors(&anchor_boxes, &sample.boxes, pos_iou, neg_iou)?;
    let mut classes = Vec::with_capacity(anchors.len());
    let mut offsets = vec![0.0; anchors.len() * 4];
    let mut positive = vec![false; anchors.len()];
    for (n, a) in assignment.iter().enumerate() {
        classes.push(match *a {
            AnchorAssignment::Positive(g) => {
                let gt = &sample.boxes[g];
                offsets[n * 4..n * 4 + 4].copy_from_slice(&encode_offsets(&gt.bbox, &anchors[n].bbox)?);
                positive[n] = true;
                AnchorTarget::Positive(gt.class_id)
            }
            AnchorAssignment::Negative => AnchorTarget::Negative,
            AnchorAssignment::Ignore => AnchorTarget::Ignore,
        });
    }
    Ok(Targets { classes, offsets, positive })
}

/// The five terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Focal,
    Regression,
    ClassDistill,
    BoxDistill,
    FeatureDistill,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Focal,
        LossTerm::Regression,
        LossTerm::ClassDistill,
        LossTerm::BoxDistill,
        LossTerm::FeatureDistill,
    ];
}

#[derive(Debug, Clone, Copy)]
struct LossWeights {
    focal: f64,
    regression: f64,
    class_distill: f64,
    box_distill: f64,
    feature_distill: f64,
}

impl LossWeights {
    fn from_config(cfg: &DistillConfig) -> Self {
        LossWeights {
            focal: 1.0,
            regression: cfg.lambda1,
            class_distill: cfg.lambda2,
            box_distill: cfg.lambda3,
            feature_distill: cfg.lambda4,
        }
    }

    fn only(term: LossTerm) -> Self {
        let mut w = [0.0; 5];
        w[term as usize] = 1.0;
        LossWeights {
            focal: w[0],
            regression: w[1],
            class_distill: w[2],
            box_distill: w[3],
            feature_distill: w[4],
        }
    }

    fn uses_teacher(&self) -> bool {
        self.class_distill > 0.0 || self.box_distill > 0.0 || self.feature_distill > 0.0
    }

    fn apply(&self, l: &LossBreakdown) -> f64 {
        self.focal * l.focal
            + self.regression * l.regression
            + self.class_distill * l.class_distill
            + self.box_distill * l.box_distill
            + self.feature_distill * l.feature_distill
    }
}

/// Everything needed to score one image.
pub struct LossContext<'a> {
    pub student: &'a DetectorModel,
    pub teacher: Option<&'a FrozenTeacher>,
    pub cfg: &'a DistillConfig,
}

impl LossContext<'_> {
    fn old_classes(&self) -> usize {
        self.teacher.map_or(0, |t| t.num_classes())
    }

    fn focal_range(&self, sample: &Sample) -> Range<usize> {
        let k = self.student.num_classes();
        match (sample.provenance, self.cfg.focal_scope) {
            (Provenance::New, FocalScope::NewClasses) => self.old_classes()..k,
            _ => 0..k,
        }
    }

    /// Loss components of one image and, optionally, parameter gradients of
    /// the weighted total.
    pub fn image_loss(&self, sample: &Sample, want_grad: bool) -> Result<(LossBreakdown, Option<Gradients>)> {
        self.weighted_image_loss(sample, want_grad, &LossWeights::from_config(self.cfg))
    }

    /// One unweighted loss term of one image and its parameter gradients.
    pub fn term_loss(&self, sample: &Sample, term: LossTerm) -> Result<(f64, Gradients)> {
        let (parts, grads) = self.weighted_image_loss(sample, true, &LossWeights::only(term))?;
        Ok((parts.total, grads.expect("gradient requested")))
    }

    fn weighted_image_loss(
        &self,
        sample: &Sample,
        want_grad: bool,
        w: &LossWeights,
    ) -> Result<(LossBreakdown, Option<Gradients>)> {
        let image = sample.image.as_ref();
        let student = self.student;
        let cfg = self.cfg;
        let k = student.num_classes();
        let pass: ForwardPass = student.forward(image);
        let raw = pass.raw();
        let anchors = student.anchors(image.width, image.height);
        let targets = build_targets(&anchors, sample, cfg.positive_iou, cfg.negative_iou)?;

        let (focal, mut g_cls) =
            focal_loss_with_grad(&raw.class_logits, k, &targets.classes, self.focal_range(sample), &cfg.focal);
        g_cls.iter_mut().for_each(|g| *g *= w.focal);
        let (regression, mut g_box) = regression_loss_with_grad(&raw.box_offsets, &targets.offsets, &targets.positive);
        g_box.iter_mut().for_each(|g| *g *= w.regression);

        let mut out = LossBreakdown {
            focal,
            regression,
            ..Default::default()
        };
        let mut g_feat: Vec<Tensor3> = Vec::new();

        if let Some(teacher) = self.teacher.filter(|_| w.uses_teacher()) {
            let m = teacher.num_classes();
            if m == 0 || m > k {
                return Err(Error::Vocabulary(format!(
                    "student with {k} classes cannot distil a {m}-class teacher"
                )));
            }
            let t = teacher.outputs(image);
            if w.class_distill > 0.0 {
                let mask: Option<Vec<bool>> = match cfg.class_distill_anchors {
                    ClassDistillAnchors::All => None,
                    ClassDistillAnchors::TeacherConfident { min_score } => Some(
                        t.probs
                            .chunks(m)
                            .map(|row| row.iter().any(|&p| p >= min_score))
                            .collect(),
                    ),
                };
                let (l, g) = class_distill_with_grad(&t.probs, m, &raw.class_logits, k, mask.as_deref());
                out.class_distill = l;
                for (a, b) in g_cls.iter_mut().zip(g) {
                    *a += w.class_distill * b;
                }
            }
            if w.box_distill > 0.0 {
                let sel = select_teacher_boxes(&t.raw, cfg.k_box);
                let (l, g) = box_distill_with_grad(&sel, &raw.box_offsets);
                out.box_distill = l;
                for (a, b) in g_box.iter_mut().zip(g) {
                    *a += w.box_distill * b;
                }
            }
            if w.feature_distill > 0.0 {
                let tf: Vec<&Tensor3> = t.features.iter().collect();
                let (l, mut g) = feature_distill_with_grad(&tf, &pass.features(), cfg.feature_levels.as_deref())?;
                out.feature_distill = l;
                for level in &mut g {
                    level.data.iter_mut().for_each(|v| *v *= w.feature_distill);
                }
                g_feat = g;
            }
        }
        out.total = w.apply(&out);
        if !out.total.is_finite() {
            return Err(Error::Config(format!("non-finite loss on sample '{}'", sample.id)));
        }
        let grads = want_grad.then(|| {
            student.backward(
                &pass,
                &OutputGrads {
                    class_logits: g_cls,
                    box_offsets: g_box,
                    features: g_feat,
                },
            )
        });
        Ok((out, grads))
    }
}

/// Batch-mean loss components.
pub fn total_loss(
    batch: &[Sample],
    student: &DetectorModel,
    teacher: Option<&FrozenTeacher>,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    if let Some(t) = teacher {
        if student.num_classes() < t.num_classes() {
            return Err(Error::Vocabulary("student has fewer classes than the teacher".into()));
        }
    }
    let ctx = LossContext { student, teacher, cfg };
    let parts = cfg.exec.map(batch, |s| ctx.image_loss(s, false).map(|r| r.0));
    let mut acc = LossBreakdown::default();
    for p in parts {
        acc.accumulate(&p?);
    }
    Ok(acc.scaled(1.0 / batch.len().max(1) as f64))
}

/// Batch-mean loss and parameter gradients, reduced in input order.
pub fn batch_gradients(
    batch: &[Sample],
    student: &DetectorModel,
    teacher: Option<&FrozenTeacher>,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let ctx = LossContext { student, teacher, cfg };
    let parts = cfg.exec.map(batch, |s| ctx.image_loss(s, true));
    let mut acc = LossBreakdown::default();
    let mut grads = Gradients::zeros_like(student);
    for p in parts {
        let (l, g) = p?;
        acc.accumulate(&l);
        grads.add_assign(&g.expect("gradient requested"));
    }
    let s = 1.0 / batch.len().max(1) as f64;
    grads.scale(s);
    Ok((acc.scaled(s), grads))
}

/// One optimiser step's record in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub focal: f64,
    pub regression: f64,
    pub class_distill: f64,
    pub box_distill: f64,
    pub feature_distill: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub k_box: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub wall_ms: f64,
}

impl TrainingLog {
    /// Newline-delimited JSON, one step record per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epochs.first().map_or(0, |e| e.steps)
    }
}

/// Number of optimiser steps per epoch for `n` images.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mini-batch Adam training of `student` on `samples`, optionally distilling
/// from `teacher`. Batches follow a seed-determined shuffle per epoch.
pub fn train(
    student: &mut DetectorModel,
    teacher: Option<&FrozenTeacher>,
    samples: &[Sample],
    cfg: &DistillConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let started = Instant::now();
    let mut adam = Adam::new(cfg.learning_rate, student.parameter_count());
    let mut log = TrainingLog {
        k_box: cfg.k_box,
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let step_start = Instant::now();
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = batch_gradients(&batch, student, teacher, cfg)?;
            adam.step(student, &grads);
            epoch_sum.accumulate(&loss);
            epoch_steps += 1;
            log.steps.push(StepRecord {
                epoch,
                step,
                focal: loss.focal,
                regression: loss.regression,
                class_distill: loss.class_distill,
                box_distill: loss.box_distill,
                feature_distill: loss.feature_distill,
                total: loss.total,
                lr: cfg.learning_rate,
                wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        log.epochs.push(EpochSummary {
            epoch,
            steps: epoch_steps,
            mean: epoch_sum.scaled(1.0 / epoch_steps.max(1) as f64),
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("epoch {epoch}: {:?}", log.epochs.last().map(|e| e.mean));
    }
    log.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(log)
}

/// Result of one incremental learning task.
#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub model: DetectorModel,
    pub log: TrainingLog,
    pub new_classes: Vec<String>,
}

/// Learns the classes of `new_data` on top of `old`.
///
/// The old model is frozen as teacher, the student is the old model with an
/// expanded class head, and training runs on the new images plus any
/// exemplars (which keep their old-class ground truth).
pub fn train_incremental(
    old: &DetectorModel,
    new_data: &Dataset,
    exemplars: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<IncrementalOutcome> {
    if new_data.is_empty() {
        return Err(Error::Empty("new-class dataset has no images".into()));
    }
    let new_classes = new_data.present_classes();
    if new_classes.is_empty() {
        return Err(Error::Empty("new-class dataset has no boxes".into()));
    }
    if let Some(clash) = new_classes.iter().find(|c| old.labels.contains(c)) {
        return Err(Error::Vocabulary(format!(
            "class '{clash}' is already known to the model"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher = FrozenTeacher::new(old.clone());
    let mut student = old.expand_class_head(&new_classes, &mut rng)?;
    let fresh = new_data.clone().with_provenance(Provenance::New);
    let merged = match exemplars {
        Some(ex) => merge_with_new_data(ex, &fresh, cfg.seed)?,
        None => fresh,
    };
    let samples = merged.remap_to(&student.labels)?.samples;
    let teacher_ref = cfg.uses_teacher().then_some(&teacher);
    let log = train(&mut student, teacher_ref, &samples, cfg)?;
    Ok(IncrementalOutcome {
        model: student,
        log,
        new_classes,
    })
}
