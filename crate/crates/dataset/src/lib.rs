//! Automatic construction of a detection training set from noisy images
//! retrieved by class-name query.
//!
//! The flow is fetch, propose, classify, vote for credible labels, then
//! purify: drop small boxes and boxes without a credible label, and resolve
//! overlaps by keeping the box with the larger accumulated credible
//! confidence (ACCS).

pub mod fixture;
pub mod manifest;
pub mod metrics;
pub mod providers;
pub mod scripted;

use std::collections::BTreeMap;
use std::time::Instant;

use incdet_core::exec::Exec;
use incdet_core::geometry::BBox;
use incdet_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestBox, ManifestConfig, ManifestImage};
pub use metrics::{score_construction, ConstructionScore};
pub use providers::{
    ClassifierProvider, EmbeddingProvider, ImageSource, LabelScore, ProposalProvider, SourceImage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Boxes must cover more than this fraction of the image area.
    pub thr_b: f64,
    /// Alias admission: `cos(label, top label) + cos(label, query) > thr_d`.
    pub thr_d: f64,
    /// Two boxes conflict when their intersection exceeds this fraction of
    /// the smaller box's area.
    pub thr_o: f64,
    /// Classifier labels kept per box.
    pub k: usize,
    pub images: usize,
    pub exec: Exec,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            thr_b: 0.01,
            thr_d: 1.0,
            thr_o: 0.5,
            k: 5,
            images: 100,
            exec: Exec::default(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.thr_b) {
            return Err(Error::Config("thr_b must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.thr_o) {
            return Err(Error::Config("thr_o must be in [0, 1]".into()));
        }
        if !self.thr_d.is_finite() {
            return Err(Error::Config("thr_d must be finite".into()));
        }
        if self.k == 0 || self.images == 0 {
            return Err(Error::Config("k and images must be at least 1".into()));
        }
        Ok(())
    }
}

/// A proposal with its top-k labels, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub labels: Vec<LabelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleLabelSet {
    pub query: String,
    /// The most voted label.
    pub true_label: String,
    /// Every credible label, sorted; contains `true_label`.
    pub aliases: Vec<String>,
    /// Vote count of every label seen.
    pub votes: BTreeMap<String, usize>,
}

impl CredibleLabelSet {
    pub fn contains(&self, label: &str) -> bool {
        self.aliases.binary_search_by(|a| a.as_str().cmp(label)).is_ok()
    }
}

fn is_large_enough(b: &BBox, image_area: f64, thr_b: f64) -> bool {
    b.area() > thr_b * image_area
}

fn image_area(img: &SourceImage) -> f64 {
    (img.image.width * img.image.height) as f64
}

/// Fetches up to `count` images for `query`.
pub fn fetch_images(source: &dyn ImageSource, query: &str, count: usize) -> Result<Vec<SourceImage>> {
    source.fetch(query, count)
}

/// Proposals of every image with their top-`k` labels, in image order.
pub fn predict_boxes(
    images: &[SourceImage],
    proposals: &dyn ProposalProvider,
    classifier: &dyn ClassifierProvider,
    k: usize,
    exec: Exec,
) -> Vec<Vec<BoxPrediction>> {
    exec.map(images, |img| {
        proposals
            .propose(img)
            .into_iter()
            .map(|bbox| {
                let mut labels = classifier.classify(img, &bbox, k);
                labels.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
                labels.truncate(k);
                BoxPrediction { bbox, labels }
            })
            .collect()
    })
}

/// Votes over the top-k labels of every box larger than `thr_b` of its
/// image; the winner (ties to the lexicographically smallest label) is the
/// true label, and any voted label passing the similarity test joins it.
pub fn vote_credible_labels(
    images: &[SourceImage],
    predictions: &[Vec<BoxPrediction>],
    embedding: &dyn EmbeddingProvider,
    query: &str,
    cfg: &BuildConfig,
) -> Result<CredibleLabelSet> {
    if images.is_empty() {
        return Err(Error::Empty("no images to vote over".into()));
    }
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    let mut voting_boxes = 0usize;
    for (img, preds) in images.iter().zip(predictions) {
        let area = image_area(img);
        for p in preds.iter().filter(|p| is_large_enough(&p.bbox, area, cfg.thr_b)) {
            voting_boxes += 1;
            for l in p.labels.iter().take(cfg.k) {
                *votes.entry(l.name.clone()).or_default() += 1;
            }
        }
    }
    if voting_boxes == 0 || votes.is_empty() {
        return Err(Error::Empty(format!("no labelled boxes above the size threshold for '{query}'")));
    }
    // BTreeMap iterates in label order, so the first maximum wins ties
    let mut true_label = String::new();
    let mut best = 0usize;
    for (label, &n) in &votes {
        if n > best {
            best = n;
            true_label = label.clone();
        }
    }
    let mut aliases = vec![true_label.clone()];
    for label in votes.keys().filter(|l| **l != true_label) {
        let pass = match (embedding.similarity(label, &true_label), embedding.similarity(label, query)) {
            (Some(a), Some(b)) => a + b > cfg.thr_d,
            _ => false,
        };
        if pass {
            aliases.push(label.clone());
        }
    }
    aliases.sort();
    Ok(CredibleLabelSet {
        query: query.to_string(),
        true_label,
        aliases,
        votes,
    })
}

/// Sum of the scores of the prediction's labels that are credible.
pub fn accs(prediction: &BoxPrediction, credible: &CredibleLabelSet) -> f64 {
    prediction
        .labels
        .iter()
        .filter(|l| credible.contains(&l.name))
        .map(|l| l.score)
        .sum()
}

pub fn overlaps(a: &BBox, b: &BBox, thr_o: f64) -> bool {
    a.intersection_area(b) > thr_o * a.area().min(b.area())
}

/// Box counts after each purification filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PurifyCounts {
    pub proposals: usize,
    pub after_size: usize,
    pub after_credible: usize,
    pub after_overlap: usize,
}

impl std::ops::AddAssign for PurifyCounts {
    fn add_assign(&mut self, o: Self) {
        self.proposals += o.proposals;
        self.after_size += o.after_size;
        self.after_credible += o.after_credible;
        self.after_overlap += o.after_overlap;
    }
}

/// Indices of the boxes of one image that survive purification, in
/// proposal order.
pub fn purify_image(
    preds: &[BoxPrediction],
    area: f64,
    credible: &CredibleLabelSet,
    cfg: &BuildConfig,
) -> (Vec<usize>, PurifyCounts) {
    let mut counts = PurifyCounts {
        proposals: preds.len(),
        ..Default::default()
    };
    let sized: Vec<usize> = (0..preds.len())
        .filter(|&i| is_large_enough(&preds[i].bbox, area, cfg.thr_b))
        .collect();
    counts.after_size = sized.len();
    let mut candidates: Vec<(usize, f64)> = sized
        .into_iter()
        .filter(|&i| preds[i].labels.iter().any(|l| credible.contains(&l.name)))
        .map(|i| (i, accs(&preds[i], credible)))
        .collect();
    counts.after_credible = candidates.len();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = Vec::new();
    for (i, _) in candidates {
        if kept.iter().all(|&j| !overlaps(&preds[i].bbox, &preds[j].bbox, cfg.thr_o)) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    counts.after_overlap = kept.len();
    (kept, counts)
}

/// Filters every image's predictions into a manifest for the query class.
pub fn purify(
    images: &[SourceImage],
    predictions: &[Vec<BoxPrediction>],
    credible: &CredibleLabelSet,
    cfg: &BuildConfig,
    provider: &str,
) -> (DatasetManifest, PurifyCounts) {
    let mut total = PurifyCounts::default();
    let mut entries = Vec::new();
    for (img, preds) in images.iter().zip(predictions) {
        let (kept, counts) = purify_image(preds, image_area(img), credible, cfg);
        total += counts;
        if kept.is_empty() {
            continue;
        }
        let boxes = kept
            .into_iter()
            .map(|i| {
                let p = &preds[i];
                ManifestBox {
                    x_min: p.bbox.x_min,
                    y_min: p.bbox.y_min,
                    x_max: p.bbox.x_max,
                    y_max: p.bbox.y_max,
                    class: credible.query.clone(),
                    accs: accs(p, credible),
                    labels: p.labels.iter().filter(|l| credible.contains(&l.name)).cloned().collect(),
                }
            })
            .collect();
        entries.push(ManifestImage {
            path: img.path.clone(),
            width: img.image.width,
            height: img.image.height,
            boxes,
        });
    }
    let manifest = DatasetManifest {
        classes: vec![credible.query.clone()],
        config: ManifestConfig {
            thr_b: cfg.thr_b,
            thr_d: cfg.thr_d,
            thr_o: cfg.thr_o,
            k: cfg.k,
            provider: provider.to_string(),
        },
        images: entries,
    };
    (manifest, total)
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub fetch_ms: f64,
    pub predict_ms: f64,
    pub vote_ms: f64,
    pub purify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub query: String,
    pub fetched: usize,
    pub counts: PurifyCounts,
    pub retained_images: usize,
    pub credible: CredibleLabelSet,
    pub timings: StageTimings,
}

/// The providers a build draws on.
pub struct Providers<'a> {
    pub source: &'a dyn ImageSource,
    pub proposals: &'a dyn ProposalProvider,
    pub classifier: &'a dyn ClassifierProvider,
    pub embedding: &'a dyn EmbeddingProvider,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Fetch, predict, vote and purify for one query.
pub fn build_dataset(query: &str, providers: &Providers, cfg: &BuildConfig) -> Result<(DatasetManifest, BuildReport)> {
    cfg.validate()?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let images = fetch_images(providers.source, query, cfg.images)?;
    timings.fetch_ms = ms_since(t);

    let t = Instant::now();
    let predictions = predict_boxes(&images, providers.proposals, providers.classifier, cfg.k, cfg.exec);
    timings.predict_ms = ms_since(t);

    let t = Instant::now();
    let credible = vote_credible_labels(&images, &predictions, providers.embedding, query, cfg)?;
    timings.vote_ms = ms_since(t);

    let t = Instant::now();
    let (manifest, counts) = purify(&images, &predictions, &credible, cfg, &providers.proposals.id());
    timings.purify_ms = ms_since(t);

    log::info!(
        "built '{query}': {} of {} images retained, credible labels {:?}",
        manifest.images.len(),
        images.len(),
        credible.aliases
    );
    let report = BuildReport {
        query: query.to_string(),
        fetched: images.len(),
        counts,
        retained_images: manifest.images.len(),
        credible,
        timings,
    };
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use providers::WordVectors;
    use std::sync::Arc;

    use incdet_core::tensor::Tensor3;

    fn image(path: &str) -> SourceImage {
        SourceImage {
            source_id: "t".into(),
            path: path.into(),
            image: Arc::new(Tensor3::zeros(1, 100, 100)),
        }
    }

    fn pred(b: (f64, f64, f64, f64), labels: &[(&str, f64)]) -> BoxPrediction {
        BoxPrediction {
            bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
            labels: labels
                .iter()
                .map(|(n, s)| LabelScore {
                    name: n.to_string(),
                    score: *s,
                })
                .collect(),
        }
    }

    fn credible(aliases: &[&str]) -> CredibleLabelSet {
        let mut aliases: Vec<String> = aliases.iter().map(|s| s.to_string()).collect();
        aliases.sort();
        CredibleLabelSet {
            query: "q".into(),
            true_label: aliases[0].clone(),
            aliases,
            votes: BTreeMap::new(),
        }
    }

    #[test]
    fn accs_sums_credible_scores() {
        let c = credible(&["a", "b"]);
        assert_eq!(accs(&pred((0., 0., 10., 10.), &[("x", 0.3)]), &c), 0.0);
        let p = pred((0., 0., 10., 10.), &[("a", 0.4), ("b", 0.2)]);
        assert!((accs(&p, &c) - 0.6).abs() < 1e-12);
        let mut q = p.clone();
        q.labels.push(LabelScore {
            name: "z".into(),
            score: 0.1,
        });
        assert_eq!(accs(&q, &c), accs(&p, &c));
    }

    #[test]
    fn vote_picks_majority_and_breaks_ties_by_name() {
        let wv = WordVectors::default();
        let imgs = vec![image("a")];
        let cfg = BuildConfig::default();
        let preds = vec![vec![
            pred((0., 0., 50., 50.), &[("crock pot", 0.9)]),
            pred((0., 0., 40., 50.), &[("crock pot", 0.9)]),
            pred((10., 0., 50., 50.), &[("crock pot", 0.9)]),
            pred((0., 10., 50., 50.), &[("pressure cooker", 0.9)]),
        ]];
        let c = vote_credible_labels(&imgs, &preds, &wv, "slow cooker", &cfg).unwrap();
        assert_eq!(c.true_label, "crock pot");
        let tie = vec![vec![pred((0., 0., 50., 50.), &[("b", 0.9), ("a", 0.1)])]];
        assert_eq!(vote_credible_labels(&imgs, &tie, &wv, "q", &cfg).unwrap().true_label, "a");
    }

    #[test]
    fn vote_errors_without_large_boxes() {
        let wv = WordVectors::default();
        let preds = vec![vec![pred((0., 0., 10., 10.), &[("a", 0.9)])]];
        assert!(vote_credible_labels(&[image("a")], &preds, &wv, "q", &BuildConfig::default()).is_err());
    }

    #[test]
    fn nested_boxes_keep_higher_accs() {
        let c = credible(&["a"]);
        let preds = vec![
            pred((0., 0., 60., 60.), &[("a", 0.9)]),
            pred((10., 10., 30., 30.), &[("a", 0.3)]),
        ];
        let (kept, counts) = purify_image(&preds, 10_000.0, &c, &BuildConfig::default());
        assert_eq!(kept, vec![0]);
        assert_eq!(counts.after_credible, 2);
    }

    #[test]
    fn equal_accs_keeps_earlier_box() {
        let c = credible(&["a"]);
        let preds = vec![
            pred((0., 0., 40., 40.), &[("a", 0.5)]),
            pred((5., 5., 45., 45.), &[("a", 0.5)]),
        ];
        assert_eq!(purify_image(&preds, 10_000.0, &c, &BuildConfig::default()).0, vec![0]);
    }

    #[test]
    fn disjoint_credible_boxes_both_kept() {
        let c = credible(&["a"]);
        let preds = vec![
            pred((0., 0., 30., 30.), &[("a", 0.5)]),
            pred((50., 50., 90., 90.), &[("a", 0.7)]),
        ];
        assert_eq!(purify_image(&preds, 10_000.0, &c, &BuildConfig::default()).0, vec![0, 1]);
    }
}
