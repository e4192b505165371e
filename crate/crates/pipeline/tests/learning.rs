mod common;

use common::{fresh_registry, small_config, world};
use incdet_core::tensor::Tensor3;
use incdet_pipeline::config::Mode;
use incdet_pipeline::learn::{run_learning_task, Trainer};
use incdet_pipeline::service::{TrainerClient, TrainerService};
use incdet_pipeline::PipelineError;

fn cooker() -> Vec<String> {
    vec!["slow cooker".to_string()]
}

#[test]
fn both_modes_give_the_same_snapshot() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();

    let reg_a = fresh_registry(&dir.path().join("a"));
    let cfg_a = small_config(&w.corpus, reg_a.root());
    let local = Trainer::from_config(&cfg_a).unwrap();
    let a = run_learning_task(&cfg_a, &reg_a, &local, &cooker(), &cfg_a.task_settings()).unwrap();

    let service = TrainerService::start("127.0.0.1:0", w.corpus.clone(), dir.path().join("work")).unwrap();
    let reg_b = fresh_registry(&dir.path().join("b"));
    let mut cfg_b = small_config(&w.corpus, reg_b.root());
    cfg_b.mode = Mode::EdgeCloud;
    cfg_b.trainer_url = service.url();
    let remote = Trainer::from_config(&cfg_b).unwrap();
    let b = run_learning_task(&cfg_b, &reg_b, &remote, &cooker(), &cfg_b.task_settings()).unwrap();
    service.shutdown();

    assert_eq!(a.snapshot_hash, b.snapshot_hash);
    assert_eq!(reg_a.load_exemplars(&a.snapshot_hash).unwrap(), reg_b.load_exemplars(&b.snapshot_hash).unwrap());
    assert_eq!(a.previous_hash, w.base_hash);
    assert_eq!(reg_a.current_hash().unwrap().unwrap(), a.snapshot_hash);

    assert_eq!(a.timing.mode, Mode::EdgeOnly);
    assert!(a.timing.transfer_model_s.is_none());
    assert!(a.timing.table().contains("N/A"));
    assert!(b.timing.transfer_model_s.unwrap() >= 0.0);
    assert!(!b.timing.table().contains("N/A"));

    let model = reg_a.require_current().unwrap().model;
    assert_eq!(model.labels.last().unwrap(), "slow cooker");
    assert_eq!(a.builds[0].credible.true_label, "crock pot, slow cooker");
    let eval = a.eval.unwrap();
    let new_class = eval.per_class.iter().find(|c| c.class == "slow cooker").unwrap();
    assert!(new_class.num_gt > 0 && new_class.ap.is_some());
}

#[test]
fn empty_manifest_keeps_the_old_model() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let reg = fresh_registry(dir.path());
    let cfg = small_config(&w.corpus, reg.root());
    let mut settings = cfg.task_settings();
    settings.inject_empty_manifest = true;
    let err = run_learning_task(&cfg, &reg, &Trainer::from_config(&cfg).unwrap(), &cooker(), &settings).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");

    let active = reg.require_current().unwrap();
    assert_eq!(active.hash, w.base_hash);
    assert!(active.model.detect(&Tensor3::zeros(1, 48, 48), 0.05, 0.5).iter().all(|d| d.score.is_finite()));
    let tasks: Vec<_> = std::fs::read_dir(reg.root().join("tasks")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(tasks.len(), 1);
    assert!(tasks[0].join("error.txt").exists());
    assert!(tasks[0].join("manifest_slow_cooker.json").exists());
    assert!(reg.lock().is_ok());
}

#[test]
fn corrupted_transfer_is_detected() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let service = TrainerService::start("127.0.0.1:0", w.corpus.clone(), dir.path().join("work")).unwrap();
    let reg = fresh_registry(&dir.path().join("reg"));
    let mut cfg = small_config(&w.corpus, reg.root());
    cfg.mode = Mode::EdgeCloud;
    cfg.trainer_url = service.url();
    let trainer = Trainer::from_config(&cfg).unwrap();

    service.corrupt_next(2);
    let err = run_learning_task(&cfg, &reg, &trainer, &cooker(), &cfg.task_settings()).unwrap_err();
    assert!(matches!(err, PipelineError::Transfer(_)), "{err}");
    assert_eq!(reg.current_hash().unwrap().unwrap(), w.base_hash);

    service.corrupt_next(1);
    let ok = run_learning_task(&cfg, &reg, &trainer, &cooker(), &cfg.task_settings()).unwrap();
    assert_eq!(reg.current_hash().unwrap().unwrap(), ok.snapshot_hash);
    service.shutdown();
}

#[test]
fn service_reports_unknown_tasks() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let service = TrainerService::start("127.0.0.1:0", w.corpus.clone(), dir.path().to_path_buf()).unwrap();
    let client = TrainerClient::new(&service.url());
    client.health().unwrap();
    assert!(matches!(client.status("task-9999"), Err(PipelineError::NotFound(_))));
    assert!(matches!(client.fetch("task-9999", "snapshot"), Err(PipelineError::NotFound(_))));
    service.shutdown();
}

#[test]
fn edge_cloud_needs_a_reachable_trainer() {
    let w = world();
    let mut cfg = small_config(&w.corpus, w.base_registry.as_path());
    cfg.mode = Mode::EdgeCloud;
    cfg.trainer_url = "http://127.0.0.1:9".into();
    assert!(matches!(Trainer::from_config(&cfg), Err(PipelineError::Service(_))));
}

#[test]
fn relearning_a_known_class_fails_cleanly() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let reg = fresh_registry(dir.path());
    let cfg = small_config(&w.corpus, reg.root());
    let err = run_learning_task(
        &cfg,
        &reg,
        &Trainer::from_config(&cfg).unwrap(),
        &["square".to_string()],
        &cfg.task_settings(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("already knows"), "{err}");
    assert_eq!(reg.current_hash().unwrap().unwrap(), w.base_hash);
}
