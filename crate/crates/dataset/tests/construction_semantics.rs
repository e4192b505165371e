use incdet_dataset::scripted::{retention_case, semantics_case, tie_case};
use std::collections::BTreeMap;

use incdet_dataset::{predict_boxes, purify, score_construction, BuildConfig, CredibleLabelSet, ImageSource};

const SEMANTICS: &str = include_str!("data/semantics_manifest.json");
const TIE: &str = include_str!("data/tie_manifest.json");

#[test]
fn semantics_manifest_matches_bytes() {
    let (manifest, report) = semantics_case().build(&BuildConfig::default()).unwrap();
    assert_eq!(manifest.to_json().unwrap(), SEMANTICS);
    assert_eq!(report.credible.true_label, "crock pot");
    assert_eq!(report.credible.aliases, vec!["crock pot", "slow cooker"]);
    assert_eq!(report.credible.votes["crock pot"], 9);
    assert_eq!(report.credible.votes["pressure cooker"], 4);
}

#[test]
fn semantics_hand_expectations() {
    let (m, _) = semantics_case().build(&BuildConfig::default()).unwrap();
    let kept: Vec<(&str, [f64; 4], f64)> = m
        .images
        .iter()
        .flat_map(|i| i.boxes.iter().map(move |b| (i.path.as_str(), [b.x_min, b.y_min, b.x_max, b.y_max], b.accs)))
        .collect();
    let expected = vec![
        ("a.png", [10., 10., 50., 50.], 0.5),
        ("a.png", [60., 60., 90., 90.], 0.75),
        ("b.png", [20., 20., 60., 60.], 0.125),
        ("c.png", [20., 20., 66., 66.], 0.625),
        ("d.png", [15., 15., 45., 45.], 0.75),
        ("d.png", [60., 10., 95., 45.], 0.625),
        ("d.png", [40., 60., 80., 90.], 0.375),
        ("d.png", [70., 60., 95., 90.], 0.25),
    ];
    assert_eq!(kept, expected);
}

#[test]
fn vote_tie_goes_to_smaller_label() {
    let (manifest, report) = tie_case().build(&BuildConfig::default()).unwrap();
    assert_eq!(report.credible.true_label, "dutch oven");
    assert_eq!(manifest.to_json().unwrap(), TIE);
}

#[test]
fn manifest_round_trips() {
    let (m, _) = semantics_case().build(&BuildConfig::default()).unwrap();
    let back = incdet_dataset::DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn retention_and_fp_by_hand_count() {
    let (manifest, gt) = retention_case();
    let s = score_construction(&manifest, &gt);
    assert_eq!(s.gt_images, 4);
    assert_eq!(s.retained_images, 3);
    assert_eq!(s.manifest_boxes, 8);
    assert_eq!(s.false_positives, 1);
    assert_eq!(s.retention_rate, 75.0);
    assert_eq!(s.fp_rate, 12.5);
}

#[test]
fn corpus_failing_credibility_gives_empty_manifest() {
    let case = tie_case();
    let cfg = BuildConfig::default();
    let images = case.source.fetch(&case.query, 10).unwrap();
    let preds = predict_boxes(&images, &case.proposals, &case.classifier, cfg.k, cfg.exec);
    let credible = CredibleLabelSet {
        query: case.query.clone(),
        true_label: "slow cooker".into(),
        aliases: vec!["slow cooker".into()],
        votes: BTreeMap::new(),
    };
    let (m, counts) = purify(&images, &preds, &credible, &cfg, "scripted");
    assert!(m.is_empty());
    assert_eq!(counts.after_credible, 0);
    let s = score_construction(&m, &BTreeMap::from([("t.png".to_string(), vec![])]));
    assert!(s.fp_undefined);
    assert_eq!(s.retention_rate, 0.0);
}

#[test]
fn box_too_small_everywhere_cannot_vote() {
    let cfg = BuildConfig { thr_b: 0.5, ..BuildConfig::default() };
    assert!(semantics_case().build(&cfg).is_err());
}
