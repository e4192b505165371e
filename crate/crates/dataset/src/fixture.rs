//! A self-contained noisy "search result" corpus built from synthetic shapes:
//! indexed query images with hidden ground truth, a crop classifier whose
//! labels read like everyday object names, and a word-vector file.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use incdet_core::geometry::BBox;
use incdet_core::synth::{render_scene, save_png, SceneConfig, Shape};
use incdet_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{DatasetManifest, ManifestBox, ManifestConfig, ManifestImage};
use crate::providers::{CentroidClassifier, LocalIndexSource, WordVectors};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const EMBEDDING_FILE: &str = "embeddings.txt";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const VALIDATION_FILE: &str = "validation.json";

/// The everyday object a shape plays in the fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Concept {
    pub shape: Shape,
    pub query: &'static str,
    pub label: &'static str,
}

pub const CONCEPTS: [Concept; 6] = [
    Concept {
        shape: Shape::Square,
        query: "gift box",
        label: "carton, box",
    },
    Concept {
        shape: Shape::Disc,
        query: "dinner plate",
        label: "plate, dish",
    },
    Concept {
        shape: Shape::Triangle,
        query: "traffic cone",
        label: "cone, pylon",
    },
    Concept {
        shape: Shape::Cross,
        query: "first aid sign",
        label: "plus sign",
    },
    Concept {
        shape: Shape::Ring,
        query: "slow cooker",
        label: "crock pot, slow cooker",
    },
    Concept {
        shape: Shape::Bar,
        query: "cocktail shaker",
        label: "cocktail shaker",
    },
];

pub fn concept_of_query(query: &str) -> Option<Concept> {
    CONCEPTS.into_iter().find(|c| c.query == query)
}

pub fn concept_of_shape(shape: Shape) -> Concept {
    CONCEPTS.into_iter().find(|c| c.shape == shape).expect("every shape has a concept")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    /// Classes the deployed model already knows (shape names).
    pub base_classes: Vec<String>,
    /// Queries with indexed images.
    pub queries: Vec<String>,
    pub images_per_query: usize,
    /// Share of query images that show something else entirely.
    pub off_topic_prob: f64,
    /// Training crops per label for the classifier.
    pub classifier_scenes: usize,
    /// Labelled validation scenes per known or queried class.
    pub validation_per_class: usize,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            base_classes: vec!["square".into(), "disc".into(), "triangle".into()],
            queries: vec!["slow cooker".into()],
            images_per_query: 100,
            off_topic_prob: 0.15,
            classifier_scenes: 40,
            validation_per_class: 30,
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

impl FixtureSpec {
    fn base_shapes(&self) -> Result<Vec<Shape>> {
        self.base_classes
            .iter()
            .map(|n| Shape::from_name(n).ok_or_else(|| Error::Config(format!("unknown shape '{n}'"))))
            .collect()
    }

    fn query_concepts(&self) -> Result<Vec<Concept>> {
        self.queries
            .iter()
            .map(|q| concept_of_query(q).ok_or_else(|| Error::Config(format!("no fixture concept for '{q}'"))))
            .collect()
    }
}

/// The labelled validation images as a manifest; paths are relative to
/// the fixture root.
pub fn load_validation(root: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&root.join(VALIDATION_FILE))
}

/// Ground truth of the query images keyed by path, query-class boxes only.
pub fn load_ground_truth(root: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    Ok(serde_json::from_slice(&std::fs::read(root.join(GROUND_TRUTH_FILE))?)?)
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Word vectors: each concept owns one axis, words get a small seeded
/// perturbation. Words of one concept end up nearly parallel, words of
/// different concepts nearly orthogonal.
fn embedding_text(seed: u64) -> String {
    let mut groups: Vec<Vec<&str>> = CONCEPTS
        .iter()
        .map(|c| {
            let mut words: Vec<&str> = c
                .query
                .split(' ')
                .chain(c.label.split([' ', ',']))
                .filter(|w| !w.is_empty())
                .collect();
            words.sort();
            words.dedup();
            words
        })
        .collect();
    groups.push(vec!["pressure", "kettle", "jar"]);
    let dim = groups.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut written = std::collections::BTreeSet::new();
    for (g, words) in groups.iter().enumerate() {
        for w in words {
            if !written.insert(*w) {
                continue;
            }
            let v: Vec<String> = (0..dim)
                .map(|d| {
                    let base = if d == g { 1.0 } else { 0.0 };
                    format!("{:.4}", base + rng.gen_range(-0.1..0.1))
                })
                .collect();
            out.push_str(&format!("{w} {}\n", v.join(" ")));
        }
    }
    out
}

fn jitter(rng: &mut impl Rng, b: &BBox, max: f64, cfg: &SceneConfig) -> BBox {
    let mut d = || rng.gen_range(0.0..=max).round();
    BBox {
        x_min: b.x_min - d(),
        y_min: b.y_min - d(),
        x_max: b.x_max + d(),
        y_max: b.y_max + d(),
    }
    .clip(cfg.width as f64, cfg.height as f64)
}

fn train_classifier(spec: &FixtureSpec, rng: &mut impl Rng) -> Result<CentroidClassifier> {
    let cfg = &spec.scene;
    let mut crops = Vec::new();
    for concept in CONCEPTS {
        for _ in 0..spec.classifier_scenes {
            let scene = render_scene(rng, cfg, &[concept.shape]);
            let image = Arc::new(scene.image);
            for (_, b) in &scene.objects {
                crops.push((concept.label.to_string(), image.clone(), *b));
                crops.push((concept.label.to_string(), image.clone(), jitter(rng, b, 3.0, cfg)));
            }
        }
    }
    let mut clf = CentroidClassifier::fit(&crops, 12, 0.005)?;
    clf.min_score = 0.01;
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub queries: BTreeMap<String, usize>,
    pub validation_images: usize,
    pub classifier_labels: Vec<String>,
}

/// Writes the corpus under `root`: `index.json`, query images, hidden
/// ground truth, validation images, the classifier and the word vectors.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<FixtureSummary> {
    let base = spec.base_shapes()?;
    let concepts = spec.query_concepts()?;
    if spec.images_per_query == 0 {
        return Err(Error::Config("images_per_query must be at least 1".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cfg = &spec.scene;

    let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut ground_truth: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for concept in &concepts {
        let dir = format!("images/{}", slug(concept.query));
        std::fs::create_dir_all(root.join(&dir))?;
        let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != concept.shape).collect();
        let mut paths = Vec::new();
        for i in 0..spec.images_per_query {
            let content = if rng.gen_bool(spec.off_topic_prob) {
                vec![*others.choose(&mut rng).expect("other shapes")]
            } else if rng.gen_bool(cfg.extra_object_prob) {
                vec![concept.shape, *others.choose(&mut rng).expect("other shapes")]
            } else {
                vec![concept.shape]
            };
            let scene = render_scene(&mut rng, cfg, &content);
            let path = format!("{dir}/{i:05}.png");
            save_png(&scene.image, &root.join(&path))?;
            let gt = scene.objects.iter().filter(|(s, _)| *s == concept.shape).map(|(_, b)| *b).collect();
            ground_truth.insert(path.clone(), gt);
            paths.push(path);
        }
        counts.insert(concept.query.to_string(), paths.len());
        index.insert(concept.query.to_string(), paths);
    }
    std::fs::write(root.join(LocalIndexSource::INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    std::fs::write(root.join(GROUND_TRUTH_FILE), serde_json::to_string(&ground_truth)?)?;

    // validation scenes use the deployed class names: shape names for
    // known classes and query strings for the queried ones
    let mut classes: Vec<String> = spec.base_classes.clone();
    classes.extend(concepts.iter().map(|c| c.query.to_string()));
    let named: Vec<(Shape, String)> = base
        .iter()
        .map(|s| (*s, s.name().to_string()))
        .chain(concepts.iter().map(|c| (c.shape, c.query.to_string())))
        .collect();
    std::fs::create_dir_all(root.join("validation"))?;
    let mut images = Vec::new();
    for (shape, _) in &named {
        for _ in 0..spec.validation_per_class {
            let mut content = vec![*shape];
            if named.len() > 1 && rng.gen_bool(cfg.extra_object_prob) {
                let other = named.iter().filter(|(s, _)| s != shape).collect::<Vec<_>>();
                content.push(other.choose(&mut rng).expect("other classes").0);
            }
            let scene = render_scene(&mut rng, cfg, &content);
            let path = format!("validation/{:05}.png", images.len());
            save_png(&scene.image, &root.join(&path))?;
            let boxes = scene
                .objects
                .iter()
                .map(|(s, b)| ManifestBox {
                    x_min: b.x_min,
                    y_min: b.y_min,
                    x_max: b.x_max,
                    y_max: b.y_max,
                    class: named.iter().find(|(n, _)| n == s).expect("named").1.clone(),
                    accs: 1.0,
                    labels: Vec::new(),
                })
                .collect();
            images.push(ManifestImage {
                path,
                width: cfg.width,
                height: cfg.height,
                boxes,
            });
        }
    }
    let validation = DatasetManifest {
        classes,
        config: ManifestConfig {
            thr_b: 0.0,
            thr_d: 0.0,
            thr_o: 1.0,
            k: 0,
            provider: "ground_truth".into(),
        },
        images,
    };
    validation.save(&root.join(VALIDATION_FILE))?;

    let clf = train_classifier(spec, &mut rng)?;
    clf.save(&root.join(CLASSIFIER_FILE))?;
    std::fs::write(root.join(EMBEDDING_FILE), embedding_text(spec.seed))?;

    Ok(FixtureSummary {
        queries: counts,
        validation_images: validation.images.len(),
        classifier_labels: clf.labels.clone(),
    })
}

/// The providers a fixture directory supplies.
pub struct FixtureProviders {
    pub source: LocalIndexSource,
    pub classifier: CentroidClassifier,
    pub embedding: WordVectors,
}

impl FixtureProviders {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(FixtureProviders {
            source: LocalIndexSource::new(root),
            classifier: CentroidClassifier::load(&root.join(CLASSIFIER_FILE))?,
            embedding: WordVectors::load(&root.join(EMBEDDING_FILE))?,
        })
    }
}
