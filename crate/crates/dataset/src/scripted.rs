//! Small hand-written construction cases driven by scripted providers.

use std::collections::BTreeMap;
use std::sync::Arc;

use incdet_core::geometry::BBox;
use incdet_core::tensor::Tensor3;
use incdet_core::Result;

use crate::manifest::{DatasetManifest, ManifestBox, ManifestConfig, ManifestImage};
use crate::providers::{MemorySource, ScriptedClassifier, ScriptedProposals, SourceImage, WordVectors};
use crate::{build_dataset, BuildConfig, BuildReport, Providers};

/// Vectors where `crock pot` and `slow cooker` coincide, `pressure` leans
/// away from `cooker`, and `dutch oven` is unrelated.
pub const EMBEDDINGS: &str = "\
crock 1 0 0
pot 1 0 0
slow 1 0 0
cooker 1 0 0
pressure 0 3 0
dutch 0 0 1
oven 0 0 1
";

pub struct ScriptedCase {
    pub query: String,
    pub source: MemorySource,
    pub proposals: ScriptedProposals,
    pub classifier: ScriptedClassifier,
    pub embedding: WordVectors,
}

fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).expect("valid scripted box")
}

impl ScriptedCase {
    fn new(query: &str) -> Self {
        ScriptedCase {
            query: query.into(),
            source: MemorySource::default(),
            proposals: ScriptedProposals::default(),
            classifier: ScriptedClassifier::default(),
            embedding: WordVectors::parse(EMBEDDINGS).expect("valid embeddings"),
        }
    }

    fn image(&mut self, path: &str, boxes: &[(BBox, &[(&str, f64)])]) {
        let img = SourceImage {
            source_id: "memory".into(),
            path: path.into(),
            image: Arc::new(Tensor3::zeros(1, 100, 100)),
        };
        self.source.images.entry(self.query.clone()).or_default().push(img);
        self.proposals.boxes.insert(path.into(), boxes.iter().map(|(b, _)| *b).collect());
        let mut clf = std::mem::take(&mut self.classifier);
        for (b, labels) in boxes {
            clf = clf.with(path, *b, labels);
        }
        self.classifier = clf;
    }

    pub fn build(&self, cfg: &BuildConfig) -> Result<(DatasetManifest, BuildReport)> {
        let providers = Providers {
            source: &self.source,
            proposals: &self.proposals,
            classifier: &self.classifier,
            embedding: &self.embedding,
        };
        build_dataset(&self.query, &providers, cfg)
    }
}

/// Four 100x100 images exercising voting, the size filter, credibility and
/// overlap resolution.
///
/// * `a.png`: two credible boxes and a credible box below the size limit.
/// * `b.png`: a box led by a non-credible label but also carrying a
///   credible one, and a box with an unrelated label.
/// * `c.png`: a large non-credible box over a smaller credible one.
/// * `d.png`: a credible box nested in a lower-scoring credible box, a
///   disjoint one, and two that overlap below the conflict threshold.
pub fn semantics_case() -> ScriptedCase {
    let mut c = ScriptedCase::new("slow cooker");
    c.image(
        "a.png",
        &[
            (bb(10., 10., 50., 50.), &[("crock pot", 0.5), ("pressure cooker", 0.25)]),
            (bb(60., 60., 90., 90.), &[("crock pot", 0.75)]),
            (bb(0., 0., 8., 8.), &[("crock pot", 0.875)]),
        ],
    );
    c.image(
        "b.png",
        &[
            (bb(20., 20., 60., 60.), &[("pressure cooker", 0.75), ("crock pot", 0.125)]),
            (bb(0., 60., 30., 95.), &[("dutch oven", 0.5)]),
        ],
    );
    c.image(
        "c.png",
        &[
            (bb(10., 10., 70., 70.), &[("pressure cooker", 0.875)]),
            (bb(20., 20., 66., 66.), &[("crock pot", 0.625), ("pressure cooker", 0.25)]),
        ],
    );
    c.image(
        "d.png",
        &[
            (bb(10., 10., 50., 50.), &[("crock pot", 0.5)]),
            (bb(15., 15., 45., 45.), &[("crock pot", 0.5), ("slow cooker", 0.25)]),
            (bb(60., 10., 95., 45.), &[("crock pot", 0.625)]),
            (bb(40., 60., 80., 90.), &[("crock pot", 0.375)]),
            (bb(70., 60., 95., 90.), &[("crock pot", 0.25)]),
        ],
    );
    c
}

/// One image whose two labels get one vote each; the lexicographically
/// smaller unrelated label wins and only its box survives.
pub fn tie_case() -> ScriptedCase {
    let mut c = ScriptedCase::new("slow cooker");
    c.image(
        "t.png",
        &[
            (bb(5., 5., 45., 45.), &[("pressure cooker", 0.5)]),
            (bb(55., 55., 95., 95.), &[("dutch oven", 0.5)]),
        ],
    );
    c
}

/// A manifest and ground truth with four ground-truth images, three fully
/// recovered, and eight boxes of which one lies outside every ground-truth
/// box.
pub fn retention_case() -> (DatasetManifest, BTreeMap<String, Vec<BBox>>) {
    let mk = |b: BBox| ManifestBox {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
        class: "slow cooker".into(),
        accs: 0.5,
        labels: vec![],
    };
    let images: Vec<(&str, Vec<BBox>, Vec<BBox>)> = vec![
        (
            "1.png",
            vec![bb(10., 10., 50., 50.)],
            vec![bb(10., 10., 50., 50.), bb(20., 20., 30., 30.)],
        ),
        (
            "2.png",
            vec![bb(0., 0., 40., 40.), bb(50., 50., 90., 90.)],
            vec![bb(0., 0., 40., 40.), bb(52., 52., 90., 92.)],
        ),
        (
            "3.png",
            vec![bb(0., 0., 40., 40.), bb(50., 50., 90., 90.)],
            vec![bb(0., 0., 40., 40.), bb(60., 60., 70., 70.)],
        ),
        (
            "4.png",
            vec![bb(10., 10., 50., 50.)],
            vec![bb(10., 10., 50., 50.), bb(60., 60., 90., 90.)],
        ),
    ];
    let gt: BTreeMap<String, Vec<BBox>> = images.iter().map(|(p, g, _)| (p.to_string(), g.clone())).collect();
    let manifest = DatasetManifest {
        classes: vec!["slow cooker".into()],
        config: ManifestConfig {
            thr_b: 0.01,
            thr_d: 1.0,
            thr_o: 0.5,
            k: 5,
            provider: "scripted".into(),
        },
        images: images
            .into_iter()
            .map(|(p, _, m)| ManifestImage {
                path: p.into(),
                width: 100,
                height: 100,
                boxes: m.into_iter().map(mk).collect(),
            })
            .collect(),
    };
    (manifest, gt)
}
