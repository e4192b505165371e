use std::collections::BTreeMap;

use incdet_core::geometry::BBox;
use incdet_dataset::{accs, overlaps, purify_image, BoxPrediction, BuildConfig, CredibleLabelSet, LabelScore};
use proptest::prelude::*;

const VOCAB: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

fn credible() -> CredibleLabelSet {
    CredibleLabelSet {
        query: "q".into(),
        true_label: "alpha".into(),
        aliases: vec!["alpha".into(), "beta".into()],
        votes: BTreeMap::new(),
    }
}

fn prediction() -> impl Strategy<Value = BoxPrediction> {
    (0.0..90.0f64, 0.0..90.0f64, 1.0..60.0f64, 1.0..60.0f64, prop::collection::vec((0..4usize, 0.0..1.0f64), 0..5))
        .prop_map(|(x, y, w, h, labels)| BoxPrediction {
            bbox: BBox::new(x, y, (x + w).min(100.0), (y + h).min(100.0)).unwrap(),
            labels: labels
                .into_iter()
                .map(|(i, s)| LabelScore {
                    name: VOCAB[i].into(),
                    score: s,
                })
                .collect(),
        })
}

proptest! {
    #[test]
    fn purified_boxes_satisfy_every_filter(preds in prop::collection::vec(prediction(), 0..12), thr_b in 0.0..0.2f64) {
        let cfg = BuildConfig { thr_b, ..BuildConfig::default() };
        let c = credible();
        let (kept, counts) = purify_image(&preds, 10_000.0, &c, &cfg);
        prop_assert!(counts.proposals >= counts.after_size);
        prop_assert!(counts.after_size >= counts.after_credible);
        prop_assert!(counts.after_credible >= counts.after_overlap);
        prop_assert_eq!(kept.len(), counts.after_overlap);
        for &i in &kept {
            prop_assert!(preds[i].bbox.area() > thr_b * 10_000.0);
            prop_assert!(preds[i].labels.iter().any(|l| c.contains(&l.name)));
        }
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[n + 1..] {
                prop_assert!(!overlaps(&preds[i].bbox, &preds[j].bbox, cfg.thr_o));
            }
        }
    }

    #[test]
    fn every_dropped_credible_box_conflicts_with_a_kept_one(preds in prop::collection::vec(prediction(), 0..12)) {
        let cfg = BuildConfig::default();
        let c = credible();
        let (kept, _) = purify_image(&preds, 10_000.0, &c, &cfg);
        for i in 0..preds.len() {
            let eligible = preds[i].bbox.area() > cfg.thr_b * 10_000.0
                && preds[i].labels.iter().any(|l| c.contains(&l.name));
            if eligible && !kept.contains(&i) {
                let a = accs(&preds[i], &c);
                prop_assert!(kept.iter().any(|&j| overlaps(&preds[i].bbox, &preds[j].bbox, cfg.thr_o)
                    && (accs(&preds[j], &c) > a || (accs(&preds[j], &c) == a && j < i))));
            }
        }
    }

    #[test]
    fn accs_ignores_non_credible_labels(p in prediction(), extra in 0.0..1.0f64) {
        let c = credible();
        let mut q = p.clone();
        q.labels.push(LabelScore { name: "delta".into(), score: extra });
        prop_assert_eq!(accs(&p, &c), accs(&q, &c));
        prop_assert!(accs(&p, &c) >= 0.0);
    }
}
