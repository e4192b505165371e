//! Acceptance suite: runs every criterion and prints one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

#[path = "../../core/tests/support/mod.rs"]
mod support;

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use incdet_core::detector::DetectorModel;
use incdet_core::distill::{train, train_incremental, LossTerm};
use incdet_core::eval::average_precision;
use incdet_core::exemplar::{select_exemplars, ExemplarConfig};
use incdet_core::scenario::{run_scenario, run_variant, train_base, ScenarioData, ScenarioReport, ScenarioSpec, Variant};
use incdet_core::tensor::Tensor3;
use incdet_dataset::fixture::{write_fixture, FixtureSpec};
use incdet_dataset::scripted::{retention_case, semantics_case, tie_case};
use incdet_dataset::{overlaps, score_construction, BuildConfig};
use incdet_pipeline::config::Mode;
use incdet_pipeline::learn::{run_learning_task, train_base as pipeline_train_base, Trainer};
use incdet_pipeline::registry::Registry;
use incdet_pipeline::service::TrainerService;
use incdet_pipeline::{PipelineConfig, PipelineError};
use rand::SeedableRng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// The 3+1 shapes scenario shared by criteria 1 and 2.
fn forgetting_scenario() -> ScenarioReport {
    let spec = ScenarioSpec {
        variants: vec![Variant::Catastrophic, Variant::NoFeatDistill, Variant::FeatDistill],
        seeds: seeds(),
        ..ScenarioSpec::default()
    };
    run_scenario(&spec).expect("scenario runs")
}

fn criterion_1(report: &ScenarioReport) -> Outcome {
    let mut lines = Vec::new();
    for (i, &seed) in report.spec.seeds.iter().enumerate() {
        let before = report.base[i].map;
        let run = |v: Variant| {
            report
                .runs_of(v)
                .find(|r| r.seed == seed)
                .and_then(|r| r.final_report().old_mean)
                .unwrap_or(0.0)
        };
        let catastrophic = run(Variant::Catastrophic);
        let distilled = run(Variant::FeatDistill);
        lines.push(format!(
            "seed {seed}: old mAP before {before:.3}, catastrophic {catastrophic:.3}, distilled {distilled:.3} ({:.0}%)",
            100.0 * distilled / before
        ));
        check(catastrophic < 0.10, format!("seed {seed}: catastrophic old mAP {catastrophic:.3} >= 0.10"))?;
        check(
            distilled >= 0.6 * before,
            format!("seed {seed}: distilled keeps {distilled:.3} of {before:.3}"),
        )?;
    }
    Ok(lines.join("; "))
}

fn criterion_2(report: &ScenarioReport) -> Outcome {
    let feat = report.summary_of(Variant::FeatDistill).ok_or("no feat_distill runs")?.map.mean;
    let plain = report.summary_of(Variant::NoFeatDistill).ok_or("no no_feat_distill runs")?.map.mean;
    check(feat >= plain - 0.02, format!("with feature term {feat:.4} < without {plain:.4} - 0.02"))?;
    Ok(format!("mean mAP with feature term {feat:.4}, without {plain:.4}"))
}

fn criterion_3() -> Outcome {
    let s = support::grad::setup(11);
    let params = s.student.parameter_count();
    check(params <= 5000, format!("{params} parameters"))?;
    let mut parts = Vec::new();
    for term in LossTerm::ALL {
        let err = support::grad::max_relative_error(&s, term);
        parts.push(format!("{term:?} {err:.1e}"));
        check(err < 1e-4, format!("{term:?}: max relative error {err:e}"))?;
    }
    Ok(format!("{params} parameters; {}", parts.join(", ")))
}

fn criterion_4() -> Outcome {
    let worst = support::grad::max_distill_at_expansion(10, 5);
    check(worst < 1e-10, format!("largest distillation term {worst:e}"))?;
    Ok(format!("largest distillation term over 10 images {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let inst = support::ap::five_sixths_instance();
    let fast = average_precision(&inst, 0, 0.5).ok_or("undefined AP")?;
    check((fast - 5.0 / 6.0).abs() < 1e-12, format!("5/6 case gives {fast}"))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let inst = support::ap::random_instance(&mut rng);
        for class in 0..3 {
            match (average_precision(&inst, class, 0.5), support::ap::oracle_ap(&inst, class, 0.5)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                other => return Err(format!("definedness differs: {other:?}")),
            }
        }
    }
    check(worst < 1e-9, format!("max difference {worst:e}"))?;
    Ok(format!("200 instances, max difference {worst:.1e}; 5/6 case exact"))
}

fn criterion_6() -> Outcome {
    let cfg = BuildConfig::default();
    let (m, report) = semantics_case().build(&cfg).map_err(|e| e.to_string())?;
    check(
        m.to_json().map_err(|e| e.to_string())? == include_str!("../../dataset/tests/data/semantics_manifest.json"),
        "semantics manifest bytes differ",
    )?;
    check(report.credible.true_label == "crock pot", "vote winner")?;
    let (tie, tie_report) = tie_case().build(&cfg).map_err(|e| e.to_string())?;
    check(
        tie.to_json().map_err(|e| e.to_string())? == include_str!("../../dataset/tests/data/tie_manifest.json"),
        "tie manifest bytes differ",
    )?;
    check(tie_report.credible.true_label == "dutch oven", "tie break")?;
    let boxes_of = |path: &str| -> Vec<[f64; 4]> {
        m.images
            .iter()
            .filter(|i| i.path == path)
            .flat_map(|i| i.boxes.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]))
            .collect()
    };
    check(boxes_of("c.png") == vec![[20., 20., 66., 66.]], "credible overlapped box")?;
    check(!boxes_of("a.png").contains(&[0., 0., 8., 8.]), "small box kept")?;
    for img in &m.images {
        for (i, a) in img.boxes.iter().enumerate() {
            for b in &img.boxes[i + 1..] {
                check(!overlaps(&a.bbox(), &b.bbox(), cfg.thr_o), format!("overlapping pair kept in {}", img.path))?;
            }
        }
    }
    Ok(format!("{} boxes kept, both manifests byte-identical", m.box_count()))
}

fn criterion_7() -> Outcome {
    let (manifest, gt) = retention_case();
    let s = score_construction(&manifest, &gt);
    check(s.retention_rate == 75.0, format!("retention {}", s.retention_rate))?;
    check(s.fp_rate == 12.5, format!("fp {}", s.fp_rate))?;
    Ok(format!("retention {}%, fp {}%", s.retention_rate, s.fp_rate))
}

fn criterion_8() -> Outcome {
    let spec = ScenarioSpec {
        name: "3+1+1".into(),
        increments: vec![vec!["cross".into()], vec!["ring".into()]],
        variants: vec![Variant::FeatDistill],
        seeds: seeds(),
        new_images_cooccur: false,
        exemplars_per_class: 10,
        ..ScenarioSpec::default()
    };
    let without = ScenarioSpec {
        exemplars_per_class: 0,
        ..spec.clone()
    };
    let mut gains = Vec::new();
    let mut parts = Vec::new();
    for seed in seeds() {
        let data = ScenarioData::generate(&spec, seed).map_err(|e| e.to_string())?;
        let base = train_base(&spec, &data, seed).map_err(|e| e.to_string())?;
        let old = |s: &ScenarioSpec| -> Result<f64, String> {
            let run = run_variant(s, &data, &base, Variant::FeatDistill, seed).map_err(|e| e.to_string())?;
            Ok(run.final_report().old_mean.unwrap_or(0.0))
        };
        let (w, wo) = (old(&spec)?, old(&without)?);
        parts.push(format!("seed {seed}: {wo:.3} -> {w:.3}"));
        gains.push(w - wo);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let detail = format!("old-class mAP without -> with exemplars: {}; mean gain {mean:.3}", parts.join(", "));
    check(gains.iter().all(|&g| g >= 0.05), detail.clone())?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let spec = ScenarioSpec {
        base_classes: vec!["square".into(), "disc".into(), "triangle".into(), "cross".into()],
        increments: vec![vec!["ring".into()]],
        train_per_class: 200,
        new_images_per_class: Some(100),
        epochs: 2,
        ..ScenarioSpec::default()
    };
    let data = ScenarioData::generate(&spec, 0).map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let base = DetectorModel::new(spec.arch.clone(), spec.base_classes.clone(), &mut rng).map_err(|e| e.to_string())?;
    let all_classes = spec.all_classes();
    let new_classes = vec!["ring".to_string()];
    let everything = data.history_set(&all_classes).map_err(|e| e.to_string())?;
    let new = data.new_set(&new_classes).map_err(|e| e.to_string())?;
    let exemplars = select_exemplars(
        &data.history_set(&spec.base_classes).map_err(|e| e.to_string())?,
        &spec.base_classes,
        &base,
        &ExemplarConfig::default(),
    )
    .map_err(|e| e.to_string())?
    .data;
    let small = new.len() + exemplars.len();
    let ratio = everything.len() as f64 / small as f64;
    check(ratio >= 5.0, format!("all data only {ratio:.1}x larger"))?;

    let cfg = Variant::FeatDistill.config(&incdet_core::distill::DistillConfig {
        epochs: spec.epochs,
        learning_rate: spec.learning_rate,
        ..spec.distill.clone()
    });
    let full_cfg = Variant::AllData.config(&cfg);
    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for _ in 0..3 {
        let t = Instant::now();
        train_incremental(&base, &new, Some(&exemplars), &cfg).map_err(|e| e.to_string())?;
        fast.push(t.elapsed().as_secs_f64());

        let mut student = base.expand_class_head(&new_classes, &mut rng).map_err(|e| e.to_string())?;
        let samples = everything.remap_to(&student.labels).map_err(|e| e.to_string())?.samples;
        let t = Instant::now();
        train(&mut student, None, &samples, &full_cfg).map_err(|e| e.to_string())?;
        slow.push(t.elapsed().as_secs_f64());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (f, s) = (median(&mut fast), median(&mut slow));
    let speedup = s / f;
    let detail = format!(
        "{} vs {} images ({ratio:.1}x), median {s:.2}s vs {f:.2}s, speed-up {speedup:.2}x",
        everything.len(),
        small
    );
    check(speedup >= 3.0, detail.clone())?;
    Ok(detail)
}

fn stage_sum_ok(t: &incdet_pipeline::timing::TimingReport) -> Result<(), String> {
    let sum = t.stage_sum();
    check(
        (sum - t.total_s).abs() <= 0.05 * t.total_s,
        format!("{} stage sum {sum:.3}s vs total {:.3}s", t.mode.name(), t.total_s),
    )
}

fn criterion_10() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = root.path().join("corpus");
    write_fixture(&corpus, &FixtureSpec::default()).map_err(|e| e.to_string())?;
    let base_dir = root.path().join("base");
    let cfg_for = |registry: &std::path::Path| PipelineConfig {
        corpus: corpus.clone(),
        registry: registry.to_path_buf(),
        ..PipelineConfig::default()
    };
    let base_reg = Registry::open(&base_dir).map_err(|e| e.to_string())?;
    let base_hash = pipeline_train_base(&cfg_for(&base_dir), &base_reg, None).map_err(|e| e.to_string())?;
    let copy = |name: &str| {
        let dir = root.path().join(name);
        common::copy_dir(&base_dir, &dir);
        Registry::open(dir).unwrap()
    };
    let classes = vec!["slow cooker".to_string()];

    let reg_a = copy("edge_only");
    let cfg_a = cfg_for(reg_a.root());
    let trainer = Trainer::from_config(&cfg_a).map_err(|e| e.to_string())?;
    let a = run_learning_task(&cfg_a, &reg_a, &trainer, &classes, &cfg_a.task_settings()).map_err(|e| e.to_string())?;
    check(a.timing.transfer_model_s.is_none() && a.timing.table().contains("N/A"), "edge-only transfer not N/A")?;
    stage_sum_ok(&a.timing)?;
    print!("{}", a.timing.table());

    let service =
        TrainerService::start("127.0.0.1:0", corpus.clone(), root.path().join("work")).map_err(|e| e.to_string())?;
    let reg_b = copy("edge_cloud");
    let cfg_b = PipelineConfig {
        mode: Mode::EdgeCloud,
        trainer_url: service.url(),
        ..cfg_for(reg_b.root())
    };
    let remote = Trainer::from_config(&cfg_b).map_err(|e| e.to_string())?;
    let b = run_learning_task(&cfg_b, &reg_b, &remote, &classes, &cfg_b.task_settings()).map_err(|e| e.to_string())?;
    check(b.timing.transfer_model_s.is_some(), "edge-cloud transfer missing")?;
    stage_sum_ok(&b.timing)?;
    print!("{}", b.timing.table());
    check(a.snapshot_hash == b.snapshot_hash, "snapshots differ between modes")?;

    let reg_c = copy("empty_manifest");
    let cfg_c = cfg_for(reg_c.root());
    let mut settings = cfg_c.task_settings();
    settings.inject_empty_manifest = true;
    let trainer_c = Trainer::from_config(&cfg_c).map_err(|e| e.to_string())?;
    check(
        run_learning_task(&cfg_c, &reg_c, &trainer_c, &classes, &settings).is_err(),
        "empty manifest accepted",
    )?;
    let still = reg_c.require_current().map_err(|e| e.to_string())?;
    check(still.hash == base_hash, "model replaced after failed task")?;
    check(
        still.model.detect(&Tensor3::zeros(1, 48, 48), 0.05, 0.5).iter().all(|d| d.score.is_finite()),
        "old model does not serve",
    )?;

    let reg_d = copy("corrupt");
    let cfg_d = PipelineConfig {
        registry: reg_d.root().to_path_buf(),
        ..cfg_b.clone()
    };
    service.corrupt_next(2);
    let err = run_learning_task(&cfg_d, &reg_d, &remote, &classes, &cfg_d.task_settings()).unwrap_err();
    check(matches!(err, PipelineError::Transfer(_)), format!("corruption not detected: {err}"))?;
    check(
        reg_d.current_hash().map_err(|e| e.to_string())?.as_deref() == Some(base_hash.as_str()),
        "model replaced after corrupt transfer",
    )?;
    service.shutdown();

    let eval = a.eval.as_ref().map(|e| format!(", validation mAP {:.3}", e.map)).unwrap_or_default();
    Ok(format!(
        "edge-only {:.1}s, edge-cloud {:.1}s, snapshot {}{eval}; empty manifest rolled back; corrupt transfer detected",
        a.timing.total_s,
        b.timing.total_s,
        &a.snapshot_hash[..12]
    ))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let scenario = if wanted(1) || wanted(2) {
        let started = Instant::now();
        let r = catch_unwind(forgetting_scenario).map_err(|_| "scenario panicked".to_string());
        println!("3+1 scenario ran in {:.0}s", started.elapsed().as_secs_f64());
        if let Ok(rep) = &r {
            print!("{}", rep.table());
        }
        Some(r)
    } else {
        None
    };
    let from_scenario = |f: fn(&ScenarioReport) -> Outcome| -> Outcome {
        match scenario.as_ref().expect("scenario ran") {
            Ok(r) => f(r),
            Err(e) => Err(e.clone()),
        }
    };

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "catastrophic forgetting and its prevention", Box::new(|| from_scenario(criterion_1))),
        (2, "feature distillation benefit", Box::new(|| from_scenario(criterion_2))),
        (3, "gradient correctness", Box::new(criterion_3)),
        (4, "zero distillation at expansion", Box::new(criterion_4)),
        (5, "AP oracle equivalence", Box::new(criterion_5)),
        (6, "dataset construction semantics", Box::new(criterion_6)),
        (7, "retention and FP metrics", Box::new(criterion_7)),
        (8, "exemplar effect", Box::new(criterion_8)),
        (9, "training speed-up", Box::new(criterion_9)),
        (10, "pipeline integration", Box::new(criterion_10)),
    ];
    let mut results = BTreeMap::new();
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(d) => format!("PASS criterion {n:>2} ({name}, {secs:.0}s): {d}"),
            Err(d) => format!("FAIL criterion {n:>2} ({name}, {secs:.0}s): {d}"),
        };
        results.insert(*n, line);
        println!("{}", results[n]);
    }
    println!("\nsummary");
    for line in results.values() {
        println!("{line}");
    }
    if results.values().any(|l| l.starts_with("FAIL")) {
        std::process::exit(1);
    }
}
