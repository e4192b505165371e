//! Incremental-learning scenarios on the synthetic shapes corpus.
//!
//! A scenario trains a base model, then applies a sequence of class
//! increments under each learning variant and evaluates on held-out scenes
//! annotated with every class learned so far.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::{ArchConfig, DetectorModel};
use crate::distill::{train, train_incremental, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD};
use crate::exec::Exec;
use crate::exemplar::{select_exemplars, ExemplarConfig, Strategy};
use crate::synth::{SceneConfig, Shape, ShapeCorpus};

/// How an increment is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fine-tune on old and new data with the plain detection loss.
    AllData,
    /// Fine-tune on new data only with the plain detection loss.
    Catastrophic,
    /// Distillation without the feature term.
    NoFeatDistill,
    /// Full distillation.
    FeatDistill,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AllData => "all_data",
            Variant::Catastrophic => "catastrophic",
            Variant::NoFeatDistill => "no_feat_distill",
            Variant::FeatDistill => "feat_distill",
        }
    }

    /// Training configuration of the variant on top of shared settings.
    pub fn config(self, base: &DistillConfig) -> DistillConfig {
        match self {
            Variant::AllData | Variant::Catastrophic => DistillConfig {
                lambda2: 0.0,
                lambda3: 0.0,
                lambda4: 0.0,
                focal_scope: crate::distill::FocalScope::AllClasses,
                ..base.clone()
            },
            Variant::NoFeatDistill => DistillConfig {
                lambda4: 0.0,
                ..base.clone()
            },
            Variant::FeatDistill => base.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    pub base_classes: Vec<String>,
    /// Classes added by each successive increment.
    pub increments: Vec<Vec<String>>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Scenes per class in the old-data corpus.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Images available for each new class; `None` uses `train_per_class`.
    pub new_images_per_class: Option<usize>,
    /// Whether new-class images also show other classes (left unannotated).
    pub new_images_cooccur: bool,
    pub base_epochs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Old-class exemplars mixed into distillation variants; 0 disables.
    pub exemplars_per_class: usize,
    pub exemplar_strategy: Strategy,
    pub distill: DistillConfig,
    pub scene: SceneConfig,
    pub arch: ArchConfig,
    pub exec: Exec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            name: "3+1".into(),
            base_classes: vec!["square".into(), "disc".into(), "triangle".into()],
            increments: vec![vec!["cross".into()]],
            variants: vec![
                Variant::AllData,
                Variant::Catastrophic,
                Variant::NoFeatDistill,
                Variant::FeatDistill,
            ],
            seeds: vec![0, 1, 2],
            train_per_class: 200,
            test_per_class: 50,
            new_images_per_class: None,
            new_images_cooccur: true,
            base_epochs: 6,
            epochs: 6,
            learning_rate: 3e-3,
            batch_size: 8,
            exemplars_per_class: 0,
            exemplar_strategy: Strategy::Cluster,
            distill: DistillConfig::default(),
            scene: SceneConfig::default(),
            arch: ArchConfig::default(),
            exec: Exec::default(),
        }
    }
}

fn shapes_of(names: &[String]) -> Result<Vec<Shape>> {
    names
        .iter()
        .map(|n| Shape::from_name(n).ok_or_else(|| Error::Config(format!("unknown shape class '{n}'"))))
        .collect()
}

impl ScenarioSpec {
    pub fn all_classes(&self) -> Vec<String> {
        let mut all = self.base_classes.clone();
        all.extend(self.increments.iter().flatten().cloned());
        all
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all_classes();
        shapes_of(&all)?;
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(Error::Config("a class appears twice in the scenario".into()));
        }
        if self.base_classes.is_empty() || self.increments.iter().any(Vec::is_empty) {
            return Err(Error::Config("base and every increment need at least one class".into()));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("scenario needs seeds and variants".into()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            exec: self.exec,
            ..self.distill.clone()
        }
    }
}

/// Synthetic data for one seed of a scenario.
pub struct ScenarioData {
    pub history: ShapeCorpus,
    pub fresh: ShapeCorpus,
    pub test: ShapeCorpus,
}

impl ScenarioData {
    pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Self> {
        let shapes = shapes_of(&spec.all_classes())?;
        let fresh_scene = SceneConfig {
            extra_object_prob: if spec.new_images_cooccur {
                spec.scene.extra_object_prob
            } else {
                0.0
            },
            ..spec.scene.clone()
        };
        let per_new = spec.new_images_per_class.unwrap_or(spec.train_per_class);
        Ok(ScenarioData {
            history: ShapeCorpus::generate(&shapes, spec.train_per_class, &spec.scene, seed.wrapping_mul(3) + 1),
            fresh: ShapeCorpus::generate(&shapes, per_new, &fresh_scene, seed.wrapping_mul(3) + 2),
            test: ShapeCorpus::generate(&shapes, spec.test_per_class, &spec.scene, seed.wrapping_mul(3) + 3),
        })
    }

    /// Held-out scenes of `known`, annotated with `known` only.
    pub fn test_set(&self, known: &[String]) -> Result<Dataset> {
        let k = shapes_of(known)?;
        Ok(self.test.dataset(&k, &k, "test/"))
    }

    /// Old-data scenes of `known`, fully annotated for `known`.
    pub fn history_set(&self, known: &[String]) -> Result<Dataset> {
        let k = shapes_of(known)?;
        Ok(self.history.dataset(&k, &k, "history/"))
    }

    /// Images gathered for newly added classes, annotated with those only.
    pub fn new_set(&self, new: &[String]) -> Result<Dataset> {
        let n = shapes_of(new)?;
        Ok(self.fresh.dataset(&n, &n, "new/"))
    }
}

pub fn train_base(spec: &ScenarioSpec, data: &ScenarioData, seed: u64) -> Result<DetectorModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DetectorModel::new(spec.arch.clone(), spec.base_classes.clone(), &mut rng)?;
    let base = data.history_set(&spec.base_classes)?.remap_to(&spec.base_classes)?;
    let cfg = DistillConfig {
        epochs: spec.base_epochs,
        ..Variant::AllData.config(&spec.train_config(seed))
    };
    train(&mut model, None, &base.samples, &cfg)?;
    Ok(model)
}

/// Evaluation and timing after one increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub added: Vec<String>,
    pub train_images: usize,
    pub train_seconds: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub steps: Vec<StepResult>,
}

impl VariantRun {
    pub fn final_report(&self) -> &EvalReport {
        &self.steps.last().expect("at least one increment").report
    }
}

/// Applies every increment under `variant`, starting from `base`.
pub fn run_variant(
    spec: &ScenarioSpec,
    data: &ScenarioData,
    base: &DetectorModel,
    variant: Variant,
    seed: u64,
) -> Result<VariantRun> {
    let cfg = variant.config(&spec.train_config(seed));
    let mut model = base.clone();
    let mut known = spec.base_classes.clone();
    let mut steps = Vec::with_capacity(spec.increments.len());
    for (i, added) in spec.increments.iter().enumerate() {
        let step_cfg = DistillConfig {
            seed: seed.wrapping_add(i as u64 * 1000),
            ..cfg.clone()
        };
        let started = Instant::now();
        let (outcome, images) = match variant {
            Variant::AllData => {
                let mut all = known.clone();
                all.extend(added.iter().cloned());
                let full = data.history_set(&all)?;
                let mut rng = ChaCha8Rng::seed_from_u64(step_cfg.seed);
                let mut student = model.expand_class_head(added, &mut rng)?;
                let samples = full.remap_to(&student.labels)?.samples;
                let log = train(&mut student, None, &samples, &step_cfg)?;
                (
                    crate::distill::IncrementalOutcome {
                        model: student,
                        log,
                        new_classes: added.clone(),
                    },
                    samples.len(),
                )
            }
            _ => {
                let new = data.new_set(added)?;
                let exemplars = if spec.exemplars_per_class > 0 && variant != Variant::Catastrophic {
                    let ex_cfg = ExemplarConfig {
                        per_class: spec.exemplars_per_class,
                        total_budget: None,
                        strategy: spec.exemplar_strategy,
                        seed: step_cfg.seed,
                    };
                    Some(select_exemplars(&data.history_set(&known)?, &known, &model, &ex_cfg)?.data)
                } else {
                    None
                };
                let n = new.len() + exemplars.as_ref().map_or(0, Dataset::len);
                (train_incremental(&model, &new, exemplars.as_ref(), &step_cfg)?, n)
            }
        };
        let train_seconds = started.elapsed().as_secs_f64();
        model = outcome.model;
        let old = known.clone();
        known.extend(added.iter().cloned());
        let mut report = evaluate_model(
            &model,
            &data.test_set(&known)?,
            DEFAULT_SCORE_THRESHOLD,
            DEFAULT_NMS_THRESHOLD,
            spec.exec,
        )?
        .with_split(&old);
        report.scenario = format!("{}/{}/seed{}/step{}", spec.name, variant.name(), seed, i + 1);
        steps.push(StepResult {
            added: added.clone(),
            train_images: images,
            train_seconds,
            report,
        });
    }
    Ok(VariantRun { variant, seed, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub map: MeanStd,
    pub old_mean: MeanStd,
    pub new_mean: MeanStd,
    pub train_seconds: MeanStd,
}

/// Published full-scale results kept for side-by-side reading of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNumbers {
    pub label: String,
    pub values: BTreeMap<String, f64>,
}

pub fn reference_numbers() -> Vec<ReferenceNumbers> {
    let table = |label: &str, rows: &[(&str, f64)]| ReferenceNumbers {
        label: label.into(),
        values: rows.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    vec![
        table(
            "pascal 19+1 mAP (%)",
            &[("all_data", 74.7), ("catastrophic", 3.4), ("no_feat_distill", 60.2), ("feat_distill", 65.0)],
        ),
        table(
            "pascal 10+10 mAP (%)",
            &[("all_data", 74.7), ("catastrophic", 33.7), ("no_feat_distill", 62.0), ("feat_distill", 67.9)],
        ),
        table(
            "kitchen 8+slow cooker (%)",
            &[("base_before", 80.1), ("base_after", 80.8), ("new", 85.4), ("average", 81.3)],
        ),
        table(
            "kitchen 8+cocktail shaker (%)",
            &[("base_before", 80.1), ("base_after", 79.2), ("new", 32.2), ("average", 74.0)],
        ),
        table("dataset construction, deep proposals (%)", &[("retention", 64.6), ("fp", 5.37)]),
        table("training speed-up, 10 exemplars vs all data (x)", &[("speedup", 38.0)]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub spec: ScenarioSpec,
    pub base: Vec<EvalReport>,
    pub runs: Vec<VariantRun>,
    pub summary: Vec<VariantSummary>,
    pub reference: Vec<ReferenceNumbers>,
}

impl ScenarioReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &VariantRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn summary_of(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "scenario {} ({} seeds)\n{:<18} {:>15} {:>15} {:>15} {:>12}\n",
            self.spec.name,
            self.spec.seeds.len(),
            "variant",
            "mAP",
            "old",
            "new",
            "train s"
        );
        let base = MeanStd::of(&self.base.iter().map(|r| r.map).collect::<Vec<_>>());
        out.push_str(&format!("{:<18} {:>7.4}±{:<7.4}\n", "base", base.mean, base.std));
        for s in &self.summary {
            out.push_str(&format!(
                "{:<18} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>12.2}\n",
                s.variant.name(),
                s.map.mean,
                s.map.std,
                s.old_mean.mean,
                s.old_mean.std,
                s.new_mean.mean,
                s.new_mean.std,
                s.train_seconds.mean
            ));
        }
        out
    }
}

fn summarize(spec: &ScenarioSpec, runs: &[VariantRun]) -> Vec<VariantSummary> {
    spec.variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let pick = |f: &dyn Fn(&VariantRun) -> f64| MeanStd::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            VariantSummary {
                variant,
                map: pick(&|r| r.final_report().map),
                old_mean: pick(&|r| r.final_report().old_mean.unwrap_or(0.0)),
                new_mean: pick(&|r| r.final_report().new_mean.unwrap_or(0.0)),
                train_seconds: pick(&|r| r.steps.iter().map(|s| s.train_seconds).sum()),
            }
        })
        .collect()
}

/// Runs every variant for every seed.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioReport> {
    spec.validate()?;
    let mut base_reports = Vec::new();
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let data = ScenarioData::generate(spec, seed)?;
        let base = train_base(spec, &data, seed)?;
        let mut report = evaluate_model(
            &base,
            &data.test_set(&spec.base_classes)?,
            DEFAULT_SCORE_THRESHOLD,
            DEFAULT_NMS_THRESHOLD,
            spec.exec,
        )?;
        report.scenario = format!("{}/base/seed{seed}", spec.name);
        log::info!("seed {seed}: base mAP {:.4}", report.map);
        base_reports.push(report);
        for &variant in &spec.variants {
            let run = run_variant(spec, &data, &base, variant, seed)?;
            log::info!(
                "seed {seed}: {} mAP {:.4}",
                variant.name(),
                run.final_report().map
            );
            runs.push(run);
        }
    }
    let summary = summarize(spec, &runs);
    Ok(ScenarioReport {
        spec: spec.clone(),
        base: base_reports,
        runs,
        summary,
        reference: reference_numbers(),
    })
}
