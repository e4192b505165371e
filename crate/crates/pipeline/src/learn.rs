//! Learning tasks against the model registry.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use incdet_core::data::Dataset;
use incdet_core::detector::{snapshot, DetectorModel};
use incdet_core::distill::{train, DistillConfig};
use incdet_core::eval::{evaluate_model, EvalReport};
use incdet_core::exec::Exec;
use incdet_core::exemplar::{select_exemplars, ExemplarConfig};
use incdet_core::scenario::Variant;
use incdet_core::synth::{Shape, ShapeCorpus};
use incdet_core::tensor::Tensor3;
use incdet_dataset::fixture::load_validation;
use incdet_dataset::providers::LocalIndexSource;
use incdet_dataset::{BuildReport, DatasetManifest};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::bundle::ExemplarBundle;
use crate::config::{Mode, PipelineConfig};
use crate::error::{PipelineError, Result};
use crate::registry::Registry;
use crate::service::TrainerClient;
use crate::task::{execute, TaskOutput, TaskRequest, TaskSettings};
use crate::timing::TimingReport;

pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const EVAL_NMS_THRESHOLD: f64 = 0.5;

/// Where a learning task runs.
pub enum Trainer {
    Local { corpus: PathBuf },
    Remote(TrainerClient),
}

impl Trainer {
    /// Edge-cloud mode checks that the service answers before anything runs.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        match cfg.mode {
            Mode::EdgeOnly => Ok(Trainer::Local {
                corpus: cfg.corpus.clone(),
            }),
            Mode::EdgeCloud => {
                let mut client = TrainerClient::new(&cfg.trainer_url);
                client.poll_interval = Duration::from_millis(cfg.poll_interval_ms);
                client.timeout = Duration::from_secs(cfg.remote_timeout_s);
                client
                    .health()
                    .map_err(|e| PipelineError::Service(format!("trainer at {} unreachable: {e}", cfg.trainer_url)))?;
                Ok(Trainer::Remote(client))
            }
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Trainer::Local { .. } => Mode::EdgeOnly,
            Trainer::Remote(_) => Mode::EdgeCloud,
        }
    }

    /// Runs the task; the second value is the model download time.
    pub fn run(&self, req: &TaskRequest, artifacts: &Path) -> Result<(TaskOutput, Option<f64>)> {
        match self {
            Trainer::Local { corpus } => Ok((execute(req, corpus, Some(artifacts), &|_| ())?, None)),
            Trainer::Remote(client) => {
                let (out, transfer) = client.run(req)?;
                for b in &out.builds {
                    let name = format!("build_{}.json", b.query.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
                    std::fs::write(artifacts.join(name), serde_json::to_vec_pretty(b)?)?;
                }
                Ok((out, Some(transfer)))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnOutcome {
    pub task_id: String,
    pub snapshot_hash: String,
    pub previous_hash: String,
    pub timing: TimingReport,
    pub builds: Vec<BuildReport>,
    /// Validation mAP of the new model, when the corpus has validation data.
    pub eval: Option<EvalReport>,
}

fn new_task_id() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}-{:09}-{}", t.as_secs(), t.subsec_nanos(), std::process::id())
}

/// Loads the fixture validation images restricted to the model's labels.
pub fn validation_set(corpus: &Path, labels: &[String]) -> Result<Option<Dataset>> {
    let manifest = match load_validation(corpus) {
        Ok(m) => m,
        Err(incdet_core::Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let source = LocalIndexSource::new(corpus);
    let data = manifest.to_dataset(|p| source.load(p))?.restrict_to(labels);
    Ok((!data.is_empty()).then_some(data))
}

/// Decodes a candidate snapshot and checks it before it may serve.
pub fn validate_snapshot(bytes: &[u8], expected_labels: &[String]) -> Result<DetectorModel> {
    let model = snapshot::from_bytes(bytes).map_err(|e| PipelineError::Validation(e.to_string()))?;
    if model.labels != expected_labels {
        return Err(PipelineError::Validation(format!(
            "labels {:?}, expected {:?}",
            model.labels, expected_labels
        )));
    }
    let probe = Tensor3::zeros(1, 48, 48);
    let raw = model.predict(&probe);
    if raw.class_logits.iter().chain(raw.box_offsets.iter()).any(|v| !v.is_finite()) {
        return Err(PipelineError::Validation("smoke inference produced non-finite outputs".into()));
    }
    Ok(model)
}

/// Learns `classes` into the active model. On any failure the active model
/// is left in place and the error is recorded under the task directory.
pub fn run_learning_task(
    cfg: &PipelineConfig,
    registry: &Registry,
    trainer: &Trainer,
    classes: &[String],
    settings: &TaskSettings,
) -> Result<LearnOutcome> {
    let _lock = registry.lock()?;
    let active = registry.require_current()?;
    let task_id = new_task_id();
    let dir = registry.task_dir(&task_id)?;
    let result = learn_inner(cfg, registry, trainer, classes, settings, &active, &task_id, &dir);
    match &result {
        Ok(o) => std::fs::write(dir.join("outcome.json"), serde_json::to_vec_pretty(o)?)?,
        Err(e) => {
            log::error!("learning task {task_id} failed, keeping model {}: {e}", active.hash);
            std::fs::write(dir.join("error.txt"), format!("{e}\n"))?;
        }
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn learn_inner(
    cfg: &PipelineConfig,
    registry: &Registry,
    trainer: &Trainer,
    classes: &[String],
    settings: &TaskSettings,
    active: &crate::registry::Active,
    task_id: &str,
    dir: &Path,
) -> Result<LearnOutcome> {
    let exemplars = registry.load_exemplars(&active.hash)?;
    let req = TaskRequest::new(classes.to_vec(), settings.clone(), &active.bytes, exemplars);
    std::fs::write(dir.join("settings.json"), serde_json::to_vec_pretty(&req.settings)?)?;

    let started = Instant::now();
    let (out, transfer) = trainer.run(&req, dir)?;
    let total_s = started.elapsed().as_secs_f64();
    let timing = TimingReport {
        mode: trainer.mode(),
        download_images_s: out.stages.download_s,
        build_dataset_s: out.stages.build_s,
        train_model_s: out.stages.train_s,
        transfer_model_s: transfer,
        total_s,
    };
    std::fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&timing)?)?;
    std::fs::write(dir.join("snapshot.bin"), &out.snapshot)?;

    let mut labels = active.model.labels.clone();
    labels.extend(classes.iter().cloned());
    let model = validate_snapshot(&out.snapshot, &labels)?;
    let eval = match validation_set(&cfg.corpus, &model.labels)? {
        Some(data) => Some(
            evaluate_model(&model, &data, EVAL_SCORE_THRESHOLD, EVAL_NMS_THRESHOLD, Exec::default())?
                .with_split(&active.model.labels),
        ),
        None => None,
    };

    let hash = registry.publish(&out.snapshot, &out.exemplars)?;
    registry.activate(&hash)?;
    log::info!("task {task_id}: model {} replaced by {hash}", active.hash);
    Ok(LearnOutcome {
        task_id: task_id.to_string(),
        snapshot_hash: hash,
        previous_hash: active.hash.clone(),
        timing,
        builds: out.builds,
        eval,
    })
}

/// Base training data: a manifest (paths relative to its directory) or the
/// synthetic shapes of the configuration.
pub fn base_dataset(cfg: &PipelineConfig, manifest: Option<&Path>) -> Result<Dataset> {
    match manifest {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let source = LocalIndexSource::new(path.parent().unwrap_or(Path::new(".")));
            Ok(m.to_dataset(|p| source.load(p))?)
        }
        None => {
            let shapes = cfg
                .base
                .classes
                .iter()
                .map(|n| {
                    Shape::from_name(n)
                        .ok_or_else(|| incdet_core::Error::Config(format!("unknown shape class '{n}'")))
                })
                .collect::<incdet_core::Result<Vec<_>>>()?;
            let corpus = ShapeCorpus::generate(&shapes, cfg.base.images_per_class, &cfg.base.scene, cfg.seed);
            Ok(corpus.full_dataset("base/"))
        }
    }
}

/// Trains the initial model, stores it with its exemplars and activates it.
pub fn train_base(cfg: &PipelineConfig, registry: &Registry, manifest: Option<&Path>) -> Result<String> {
    let _lock = registry.lock()?;
    let data = base_dataset(cfg, manifest)?;
    let classes = data.classes.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DetectorModel::new(cfg.base.arch.clone(), classes.clone(), &mut rng)?;
    let train_cfg = Variant::AllData.config(&DistillConfig {
        epochs: cfg.base.epochs,
        learning_rate: cfg.base.learning_rate,
        batch_size: cfg.base.batch_size,
        seed: cfg.seed,
        ..cfg.distill.clone()
    });
    let log = train(&mut model, None, &data.samples, &train_cfg)?;
    if let Some(last) = log.epochs.last() {
        log::info!("base training finished, final epoch loss {:.4}", last.mean.weighted_sum(&train_cfg));
    }
    let bundle = if cfg.exemplars_per_class > 0 {
        let ex = select_exemplars(
            &data,
            &classes,
            &model,
            &ExemplarConfig {
                per_class: cfg.exemplars_per_class,
                total_budget: None,
                strategy: cfg.exemplar_strategy,
                seed: cfg.seed,
            },
        )?;
        ExemplarBundle::from_set(&ex)?
    } else {
        ExemplarBundle::default()
    };
    let bytes = snapshot::to_bytes(&model);
    let hash = registry.publish(&bytes, &bundle)?;
    registry.activate(&hash)?;
    Ok(hash)
}

/// Shared handle to the active model for inference while tasks run.
pub fn active_model(registry: &Registry) -> Result<Arc<DetectorModel>> {
    Ok(Arc::new(registry.require_current()?.model))
}
