use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use incdet_core::detector::snapshot;
use incdet_core::eval::evaluate_model;
use incdet_core::exec::Exec;
use incdet_core::scenario::{run_scenario, ScenarioSpec};
use incdet_dataset::fixture::{write_fixture, FixtureProviders, FixtureSpec};
use incdet_dataset::providers::{LocalIndexSource, RegionProposals};
use incdet_dataset::{build_dataset, DatasetManifest, Providers};
use incdet_pipeline::learn::{run_learning_task, train_base, Trainer, EVAL_NMS_THRESHOLD, EVAL_SCORE_THRESHOLD};
use incdet_pipeline::registry::Registry;
use incdet_pipeline::service::TrainerService;
use incdet_pipeline::{Mode, PipelineConfig, PipelineError, Result};

#[derive(Parser)]
#[command(name = "incdet", version, about = "Incremental object detector learning on edge devices")]
struct Cli {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Approve learning without asking.
    #[arg(long, global = true)]
    yes: bool,
    /// Overrides the image corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Overrides the model registry directory.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Overrides the trainer service URL.
    #[arg(long, global = true)]
    trainer_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic image corpus with its classifier and word vectors.
    Fixture { dir: PathBuf },
    /// Trains and activates the initial model.
    TrainBase {
        /// Training manifest; defaults to synthetic shapes of the base classes.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Builds a dataset for each class and learns them into the active model.
    Learn {
        #[arg(required = true)]
        classes: Vec<String>,
    },
    /// Builds and prints the dataset for one query.
    BuildDataset {
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a snapshot on a manifest.
    Evaluate { snapshot: PathBuf, manifest: PathBuf },
    /// Runs a synthetic incremental-learning scenario from a JSON spec.
    Scenario { spec: PathBuf },
    /// Runs the trainer service for edge-cloud mode.
    ServeTrainer {
        #[arg(long)]
        bind: Option<String>,
        /// Directory for task artifacts.
        #[arg(long, default_value = "trainer-work")]
        work: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(c) = &cli.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(r) = &cli.registry {
        cfg.registry = r.clone();
    }
    if let Some(u) = &cli.trainer_url {
        cfg.trainer_url = u.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn confirm(classes: &[String]) -> Result<()> {
    print!("Learn new classes {classes:?}? [y/N] ");
    std::io::stdout().flush()?;
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    match line.trim().to_ascii_lowercase().as_str() {
        "y" | "yes" => Ok(()),
        _ => Err(PipelineError::Declined),
    }
}

fn manifest_dataset(path: &Path) -> Result<(DatasetManifest, incdet_core::data::Dataset)> {
    let m = DatasetManifest::load(path)?;
    let source = LocalIndexSource::new(path.parent().unwrap_or(Path::new(".")));
    let data = m.to_dataset(|p| source.load(p))?;
    Ok((m, data))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Fixture { dir } => {
            let spec = FixtureSpec {
                seed: cfg.seed,
                ..FixtureSpec::default()
            };
            let summary = write_fixture(dir, &spec)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::TrainBase { manifest } => {
            let registry = Registry::open(&cfg.registry)?;
            let hash = train_base(&cfg, &registry, manifest.as_deref())?;
            println!("active model {hash}");
            println!("snapshot {}", registry.snapshot_path(&hash).display());
        }
        Command::Learn { classes } => {
            if !cli.yes {
                confirm(classes)?;
            }
            let registry = Registry::open(&cfg.registry)?;
            let trainer = Trainer::from_config(&cfg)?;
            let outcome = run_learning_task(&cfg, &registry, &trainer, classes, &cfg.task_settings())?;
            for b in &outcome.builds {
                println!(
                    "dataset '{}': {} of {} images kept, true label '{}'",
                    b.query, b.retained_images, b.fetched, b.credible.true_label
                );
            }
            print!("{}", outcome.timing.table());
            if let Some(e) = &outcome.eval {
                print!("{}", e.table());
            }
            println!("active model {}", outcome.snapshot_hash);
            println!("snapshot {}", registry.snapshot_path(&outcome.snapshot_hash).display());
        }
        Command::BuildDataset { query, out } => {
            let fx = FixtureProviders::open(&cfg.corpus)?;
            let proposals = RegionProposals::default();
            let providers = Providers {
                source: &fx.source,
                proposals: &proposals,
                classifier: &fx.classifier,
                embedding: &fx.embedding,
            };
            let (manifest, report) = build_dataset(query, &providers, &cfg.build)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                manifest.save(path)?;
                println!("manifest written to {}", path.display());
            }
        }
        Command::Evaluate { snapshot: snap, manifest } => {
            let model = snapshot::load(snap)?;
            let (m, data) = manifest_dataset(manifest)?;
            let missing: Vec<&String> = m.classes.iter().filter(|c| !model.labels.contains(c)).collect();
            if !missing.is_empty() {
                return Err(incdet_core::Error::Vocabulary(format!(
                    "manifest classes {missing:?} are unknown to the model (labels {:?})",
                    model.labels
                ))
                .into());
            }
            let report = evaluate_model(&model, &data, EVAL_SCORE_THRESHOLD, EVAL_NMS_THRESHOLD, Exec::default())?;
            print!("{}", report.table());
        }
        Command::Scenario { spec } => {
            let mut spec: ScenarioSpec = serde_json::from_slice(&std::fs::read(spec)?)?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let report = run_scenario(&spec)?;
            print!("{}", report.table());
        }
        Command::ServeTrainer { bind, work } => {
            let bind = bind.clone().unwrap_or_else(|| cfg.trainer_bind.clone());
            let service = TrainerService::start(&bind, cfg.corpus.clone(), work.clone())?;
            println!("trainer service on {}", service.url());
            service.wait();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
