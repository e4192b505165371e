//! One learning task: build datasets for the requested classes and train
//! them into the current model. The same function runs on the device and
//! inside the trainer service.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use incdet_core::data::Dataset;
use incdet_core::detector::snapshot;
use incdet_core::distill::{train_incremental, DistillConfig};
use incdet_core::exemplar::{select_exemplars, ExemplarConfig, Strategy};
use incdet_dataset::fixture::FixtureProviders;
use incdet_dataset::providers::{DetectorProposals, ProposalProvider, RegionProposals};
use incdet_dataset::{build_dataset, BuildConfig, BuildReport, DatasetManifest, Providers};
use serde::{Deserialize, Serialize};

use crate::bundle::ExemplarBundle;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    /// Class-agnostic bright-region proposals.
    #[default]
    Region,
    /// The current model at a low score threshold.
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    pub build: BuildConfig,
    pub distill: DistillConfig,
    pub exemplars_per_class: usize,
    pub exemplar_strategy: Strategy,
    pub proposals: ProposalKind,
    /// Fault injection: discard every built manifest.
    pub inject_empty_manifest: bool,
}

impl Default for TaskSettings {
    fn default() -> Self {
        crate::config::PipelineConfig::default().task_settings()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub classes: Vec<String>,
    pub settings: TaskSettings,
    /// Base64 of the model to extend.
    pub base_snapshot: String,
    pub exemplars: ExemplarBundle,
}

impl TaskRequest {
    pub fn new(classes: Vec<String>, settings: TaskSettings, base: &[u8], exemplars: ExemplarBundle) -> Self {
        TaskRequest {
            classes,
            settings,
            base_snapshot: STANDARD.encode(base),
            exemplars,
        }
    }

    pub fn base_bytes(&self) -> Result<Vec<u8>> {
        STANDARD
            .decode(&self.base_snapshot)
            .map_err(|e| PipelineError::Service(format!("base snapshot is not base64: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Building,
    Training,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSeconds {
    pub download_s: f64,
    pub build_s: f64,
    pub train_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub snapshot: Vec<u8>,
    /// Old exemplars plus those chosen for the new classes.
    pub exemplars: ExemplarBundle,
    pub builds: Vec<BuildReport>,
    pub stages: StageSeconds,
}

fn write_json(dir: Option<&Path>, name: &str, value: &impl Serialize) -> Result<()> {
    if let Some(d) = dir {
        std::fs::write(d.join(name), serde_json::to_vec_pretty(value)?)?;
    }
    Ok(())
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Runs a task against the image corpus at `corpus`. Manifests and build
/// reports are written to `artifacts` as they are produced.
pub fn execute(
    req: &TaskRequest,
    corpus: &Path,
    artifacts: Option<&Path>,
    progress: &dyn Fn(TaskState),
) -> Result<TaskOutput> {
    let s = &req.settings;
    let base = snapshot::from_bytes(&req.base_bytes()?)?;
    if req.classes.is_empty() {
        return Err(incdet_core::Error::Config("no classes to learn".into()).into());
    }
    if let Some(c) = req.classes.iter().find(|c| base.labels.contains(c)) {
        return Err(incdet_core::Error::Vocabulary(format!("the model already knows '{c}'")).into());
    }
    let fx = FixtureProviders::open(corpus)?;
    let proposals: Box<dyn ProposalProvider> = match s.proposals {
        ProposalKind::Region => Box::new(RegionProposals::default()),
        ProposalKind::Detector => Box::new(DetectorProposals::new(Arc::new(base.clone()))),
    };
    let providers = Providers {
        source: &fx.source,
        proposals: proposals.as_ref(),
        classifier: &fx.classifier,
        embedding: &fx.embedding,
    };

    progress(TaskState::Building);
    let mut stages = StageSeconds::default();
    let mut builds = Vec::new();
    let mut manifests: Vec<DatasetManifest> = Vec::new();
    for class in &req.classes {
        let (mut manifest, report) = build_dataset(class, &providers, &s.build)?;
        stages.download_s += report.timings.fetch_ms / 1e3;
        stages.build_s += (report.timings.predict_ms + report.timings.vote_ms + report.timings.purify_ms) / 1e3;
        if s.inject_empty_manifest {
            manifest.images.clear();
        }
        write_json(artifacts, &format!("manifest_{}.json", slug(class)), &manifest)?;
        write_json(artifacts, &format!("build_{}.json", slug(class)), &report)?;
        builds.push(report);
        if manifest.is_empty() {
            return Err(incdet_core::Error::Empty(format!("the dataset built for '{class}' is empty")).into());
        }
        manifests.push(manifest);
    }

    progress(TaskState::Training);
    let started = Instant::now();
    let mut samples = Vec::new();
    for m in &manifests {
        let ds = m.to_dataset(|p| fx.source.load(p))?.remap_to(&req.classes)?;
        samples.extend(ds.samples);
    }
    let new_data = Dataset::new(req.classes.clone(), samples)?;
    let old = req.exemplars.to_set()?;
    let old_data = (!old.data.is_empty()).then_some(&old.data);
    let outcome = train_incremental(&base, &new_data, old_data, &s.distill)?;
    let mut exemplars = req.exemplars.clone();
    if s.exemplars_per_class > 0 {
        let cfg = ExemplarConfig {
            per_class: s.exemplars_per_class,
            total_budget: None,
            strategy: s.exemplar_strategy,
            seed: s.distill.seed,
        };
        let chosen = select_exemplars(&new_data, &req.classes, &outcome.model, &cfg)?;
        exemplars = exemplars.merge(ExemplarBundle::from_set(&chosen)?)?;
    }
    let snapshot = snapshot::to_bytes(&outcome.model);
    stages.train_s = started.elapsed().as_secs_f64();
    Ok(TaskOutput {
        snapshot,
        exemplars,
        builds,
        stages,
    })
}
