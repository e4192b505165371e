//! Finite-difference and zero-at-expansion checks of the loss terms.

use std::sync::Arc;

use incdet_core::data::{Provenance, Sample};
use incdet_core::detector::{ArchConfig, DetectorModel};
use incdet_core::distill::{total_loss, DistillConfig, FrozenTeacher, LossContext, LossTerm};
use incdet_core::geometry::{BBox, ScoredBox};
use incdet_core::tensor::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-6;

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor3 {
    Tensor3::from_vec(1, side, side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub struct Setup {
    pub teacher: FrozenTeacher,
    pub student: DetectorModel,
    pub sample: Sample,
}

pub fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = DetectorModel::new(ArchConfig::tiny(), vec!["a".into(), "b".into()], &mut rng).unwrap();
    let mut student = old.expand_class_head(&["c".into()], &mut rng).unwrap();
    // move away from the teacher so distillation terms have non-trivial gradients
    let params: Vec<f64> = student
        .flat_parameters()
        .into_iter()
        .map(|p| p + 0.05 * (rng.gen::<f64>() - 0.5))
        .collect();
    student.set_flat_parameters(&params).unwrap();
    let sample = Sample {
        id: "g".into(),
        image: Arc::new(random_image(&mut rng, 16)),
        boxes: vec![ScoredBox::ground_truth(BBox::new(2.0, 2.0, 8.0, 8.0).unwrap(), 2)],
        provenance: Provenance::New,
    };
    Setup {
        teacher: FrozenTeacher::new(old),
        student,
        sample,
    }
}

pub fn max_relative_error(s: &Setup, term: LossTerm) -> f64 {
    let cfg = DistillConfig { k_box: 4, ..Default::default() };
    let ctx = LossContext {
        student: &s.student,
        teacher: Some(&s.teacher),
        cfg: &cfg,
    };
    let (value, grads) = ctx.term_loss(&s.sample, term).unwrap();
    assert!(value.is_finite() && value >= 0.0);
    let analytic = grads.flatten();
    let base = s.student.flat_parameters();
    let mut probe = s.student.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut eval = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            probe.set_flat_parameters(&p).unwrap();
            let ctx = LossContext {
                student: &probe,
                teacher: Some(&s.teacher),
                cfg: &cfg,
            };
            ctx.term_loss(&s.sample, term).unwrap().0
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}


/// Largest distillation term over `images` random images when the student
/// is the teacher with an expanded class head.
pub fn max_distill_at_expansion(images: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = DetectorModel::new(ArchConfig::default(), vec!["a".into(), "b".into()], &mut rng).unwrap();
    let student = old.expand_class_head(&["c".into()], &mut rng).unwrap();
    let teacher = FrozenTeacher::new(old);
    let cfg = DistillConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..images {
        let sample = Sample {
            id: "z".into(),
            image: Arc::new(random_image(&mut rng, 48)),
            boxes: vec![],
            provenance: Provenance::New,
        };
        let l = total_loss(&[sample], &student, Some(&teacher), &cfg).unwrap();
        worst = worst.max(l.class_distill).max(l.box_distill).max(l.feature_distill);
    }
    worst
}
