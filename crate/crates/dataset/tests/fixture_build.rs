use incdet_dataset::fixture::{load_ground_truth, write_fixture, FixtureProviders, FixtureSpec};
use incdet_dataset::providers::RegionProposals;
use incdet_dataset::{build_dataset, score_construction, BuildConfig, Providers};

#[test]
fn fixture_build_retains_most_on_topic_images() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec::default();
    write_fixture(dir.path(), &spec).unwrap();
    let fx = FixtureProviders::open(dir.path()).unwrap();
    let proposals = RegionProposals::default();
    let providers = Providers {
        source: &fx.source,
        proposals: &proposals,
        classifier: &fx.classifier,
        embedding: &fx.embedding,
    };
    let (manifest, report) = build_dataset("slow cooker", &providers, &BuildConfig::default()).unwrap();
    let score = score_construction(&manifest, &load_ground_truth(dir.path()).unwrap());
    eprintln!("{report:?}\n{score:?}");
    assert_eq!(report.credible.true_label, "crock pot, slow cooker");
    assert!(score.retention_rate > 60.0);
    assert!(score.fp_rate < 20.0);
}
