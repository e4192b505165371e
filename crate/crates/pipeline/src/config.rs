//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use incdet_core::detector::ArchConfig;
use incdet_core::distill::DistillConfig;
use incdet_core::exemplar::Strategy;
use incdet_core::synth::SceneConfig;
use incdet_dataset::BuildConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::task::{ProposalKind, TaskSettings};
use crate::trigger::TriggerPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dataset build and training run on this device.
    #[default]
    EdgeOnly,
    /// Dataset build and training run on a remote trainer service.
    EdgeCloud,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::EdgeOnly => "edge_only",
            Mode::EdgeCloud => "edge_cloud",
        }
    }
}

/// Initial model training on the synthetic shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTraining {
    pub classes: Vec<String>,
    pub images_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub arch: ArchConfig,
    pub scene: SceneConfig,
}

impl Default for BaseTraining {
    fn default() -> Self {
        BaseTraining {
            classes: vec!["square".into(), "disc".into(), "triangle".into()],
            images_per_class: 100,
            epochs: 6,
            learning_rate: 3e-3,
            batch_size: 8,
            arch: ArchConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Trainer service base URL used in edge-cloud mode.
    pub trainer_url: String,
    /// Address `serve-trainer` binds to.
    pub trainer_bind: String,
    /// Image corpus root with `index.json`, classifier and word vectors.
    pub corpus: PathBuf,
    pub registry: PathBuf,
    pub proposals: ProposalKind,
    pub build: BuildConfig,
    pub distill: DistillConfig,
    pub exemplars_per_class: usize,
    pub exemplar_strategy: Strategy,
    pub base: BaseTraining,
    pub trigger: TriggerPolicy,
    pub poll_interval_ms: u64,
    /// Seconds to wait for a remote task before giving up.
    pub remote_timeout_s: u64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::EdgeOnly,
            trainer_url: "http://127.0.0.1:8650".into(),
            trainer_bind: "127.0.0.1:8650".into(),
            corpus: PathBuf::from("fixture"),
            registry: PathBuf::from("registry"),
            proposals: ProposalKind::Region,
            build: BuildConfig::default(),
            distill: DistillConfig {
                epochs: 6,
                learning_rate: 3e-3,
                ..DistillConfig::default()
            },
            exemplars_per_class: 10,
            exemplar_strategy: Strategy::Cluster,
            base: BaseTraining::default(),
            trigger: TriggerPolicy::default(),
            poll_interval_ms: 20,
            remote_timeout_s: 3600,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        self.distill.validate()?;
        self.trigger.validate()?;
        if self.mode == Mode::EdgeCloud && self.trainer_url.trim().is_empty() {
            return Err(PipelineError::Core(incdet_core::Error::Config(
                "edge_cloud mode needs a trainer_url".into(),
            )));
        }
        if self.base.classes.is_empty() {
            return Err(PipelineError::Core(incdet_core::Error::Config(
                "base.classes must not be empty".into(),
            )));
        }
        Ok(())
    }

    /// Applies a seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.distill.seed = seed;
        self
    }

    pub fn task_settings(&self) -> TaskSettings {
        TaskSettings {
            build: self.build.clone(),
            distill: self.distill.clone(),
            exemplars_per_class: self.exemplars_per_class,
            exemplar_strategy: self.exemplar_strategy,
            proposals: self.proposals,
            inject_empty_manifest: false,
        }
    }
}
