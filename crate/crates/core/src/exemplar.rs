//! Old-class exemplar selection and rehearsal-set merging.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Sample};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    /// Greedy herding towards the class-mean feature.
    MeanClosest,
    /// k-means over features, one random member per cluster.
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarConfig {
    pub per_class: usize,
    /// Fixed total across classes, split evenly; overrides `per_class`.
    pub total_budget: Option<usize>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        ExemplarConfig {
            per_class: 10,
            total_budget: None,
            strategy: Strategy::Cluster,
            seed: 0,
        }
    }
}

impl ExemplarConfig {
    /// Exemplars per class; a fixed budget gives the remainder to the
    /// earliest classes.
    pub fn counts(&self, num_classes: usize) -> Vec<usize> {
        match self.total_budget {
            None => vec![self.per_class; num_classes],
            Some(total) if num_classes > 0 => {
                let (q, r) = (total / num_classes, total % num_classes);
                (0..num_classes).map(|i| q + usize::from(i < r)).collect()
            }
            Some(_) => Vec::new(),
        }
    }
}

/// Spatial mean of the deepest pyramid feature map.
pub fn feature_vector(model: &DetectorModel, sample: &Sample) -> Vec<f64> {
    model.forward(&sample.image).deepest_features().spatial_mean()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n.max(1) as f64);
    sum
}

/// Herding: repeatedly add the candidate that brings the running exemplar
/// mean closest to the class mean. Ties go to the lower index.
pub fn herding(features: &[Vec<f64>], count: usize) -> Vec<usize> {
    let dim = features.first().map_or(0, Vec::len);
    let target = mean_of(features.iter(), dim);
    let mut chosen = Vec::with_capacity(count);
    let mut used = vec![false; features.len()];
    let mut running = vec![0.0; dim];
    for k in 0..count.min(features.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if used[i] {
                continue;
            }
            let candidate: Vec<f64> = running.iter().zip(f).map(|(r, x)| (r + x) / (k + 1) as f64).collect();
            let d = sq_dist(&candidate, &target);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("candidate left");
        used[i] = true;
        chosen.push(i);
        for (r, x) in running.iter_mut().zip(&features[i]) {
            *r += x;
        }
    }
    chosen
}

/// Lloyd's k-means with k-means++ seeding; returns the cluster of each row.
pub fn kmeans(features: &[Vec<f64>], k: usize, rng: &mut impl Rng, max_iter: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut centers: Vec<Vec<f64>> = vec![features[rng.gen_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = features
            .iter()
            .map(|f| centers.iter().map(|c| sq_dist(f, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            d.iter()
                .position(|&x| {
                    t -= x;
                    t < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.gen_range(0..n)
        };
        centers.push(features[next].clone());
    }
    let nearest = |f: &Vec<f64>, centers: &[Vec<f64>]| {
        centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, sq_dist(f, ctr)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("k >= 1")
    };
    let mut assign: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
    for _ in 0..max_iter {
        let dim = features[0].len();
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = features.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(f, _)| f).collect();
            if !members.is_empty() {
                *center = mean_of(members.into_iter(), dim);
            }
        }
        // an emptied cluster takes the point farthest from its center
        for c in 0..k {
            if !assign.contains(&c) {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&features[a], &centers[assign[a]]).total_cmp(&sq_dist(&features[b], &centers[assign[b]]))
                    })
                    .expect("non-empty");
                centers[c] = features[far].clone();
                assign[far] = c;
            }
        }
        let next: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Indices of `count` chosen rows; all rows when `count` covers them.
pub fn select_indices(features: &[Vec<f64>], count: usize, strategy: Strategy, rng: &mut impl Rng) -> Vec<usize> {
    let n = features.len();
    if count >= n {
        return (0..n).collect();
    }
    match strategy {
        Strategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(count);
            idx
        }
        Strategy::MeanClosest => herding(features, count),
        Strategy::Cluster => {
            let assign = kmeans(features, count, rng, 50);
            (0..count)
                .filter_map(|c| {
                    let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                    members.choose(rng).copied()
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub image_path: String,
    pub boxes: Vec<EntryBox>,
}

/// Persisted exemplars of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarManifest {
    pub class_name: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub entries: Vec<ExemplarEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub manifests: Vec<ExemplarManifest>,
    /// Unique selected images with their old-class ground truth.
    pub data: Dataset,
}

impl ExemplarSet {
    pub fn empty(classes: Vec<String>) -> Self {
        ExemplarSet {
            manifests: Vec::new(),
            data: Dataset {
                classes,
                samples: Vec::new(),
            },
        }
    }

    pub fn count(&self) -> usize {
        self.manifests.iter().map(|m| m.entries.len()).sum()
    }

    pub fn per_class_counts(&self) -> Vec<(String, usize)> {
        self.manifests.iter().map(|m| (m.class_name.clone(), m.entries.len())).collect()
    }

    /// One JSON manifest per class, named `<class>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in &self.manifests {
            let name = m.class_name.replace(|c: char| !c.is_ascii_alphanumeric(), "_");
            std::fs::write(dir.join(format!("{name}.json")), serde_json::to_vec_pretty(m)?)?;
        }
        Ok(())
    }
}

/// Picks exemplars for each of `classes` from `history`, the old training
/// data. Each selected image keeps all of its boxes of the listed classes.
pub fn select_exemplars(
    history: &Dataset,
    classes: &[String],
    model: &DetectorModel,
    cfg: &ExemplarConfig,
) -> Result<ExemplarSet> {
    let kept = history.restrict_to(classes);
    let counts = cfg.counts(classes.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifests = Vec::with_capacity(classes.len());
    let mut chosen: BTreeMap<String, Sample> = BTreeMap::new();
    for (class, &count) in classes.iter().zip(&counts) {
        let class_id = kept
            .classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::Vocabulary(format!("class '{class}' missing from the old data")))?;
        let candidates: Vec<&Sample> = kept
            .samples
            .iter()
            .filter(|s| s.boxes.iter().any(|b| b.class_id == class_id))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Empty(format!("no images of class '{class}' to choose exemplars from")));
        }
        if count > candidates.len() {
            log::warn!(
                "class '{class}' has {} images, fewer than the {count} exemplars requested",
                candidates.len()
            );
        }
        let features: Vec<Vec<f64>> = match cfg.strategy {
            Strategy::Random => vec![Vec::new(); candidates.len()],
            _ => candidates.iter().map(|s| feature_vector(model, s)).collect(),
        };
        let picked = select_indices(&features, count, cfg.strategy, &mut rng);
        let mut entries = Vec::with_capacity(picked.len());
        for i in picked {
            let s = candidates[i];
            entries.push(ExemplarEntry {
                image_path: s.id.clone(),
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| EntryBox {
                        x_min: b.bbox.x_min,
                        y_min: b.bbox.y_min,
                        x_max: b.bbox.x_max,
                        y_max: b.bbox.y_max,
                        class: kept.classes[b.class_id].clone(),
                    })
                    .collect(),
            });
            chosen.entry(s.id.clone()).or_insert_with(|| Sample {
                provenance: Provenance::Exemplar,
                ..s.clone()
            });
        }
        manifests.push(ExemplarManifest {
            class_name: class.clone(),
            strategy: cfg.strategy,
            seed: cfg.seed,
            entries,
        });
    }
    Ok(ExemplarSet {
        manifests,
        data: Dataset::new(kept.classes.clone(), chosen.into_values().collect())?,
    })
}

/// Rebuilds exemplar samples from persisted manifests, loading pixels
/// through `load`.
pub fn load_exemplars(
    manifests: Vec<ExemplarManifest>,
    mut load: impl FnMut(&str) -> Result<crate::tensor::Tensor3>,
) -> Result<ExemplarSet> {
    let mut classes: Vec<String> = Vec::new();
    let mut samples: BTreeMap<String, Sample> = BTreeMap::new();
    for m in &manifests {
        for e in &m.entries {
            if samples.contains_key(&e.image_path) {
                continue;
            }
            let mut boxes = Vec::with_capacity(e.boxes.len());
            for b in &e.boxes {
                let id = match classes.iter().position(|c| *c == b.class) {
                    Some(i) => i,
                    None => {
                        classes.push(b.class.clone());
                        classes.len() - 1
                    }
                };
                let bbox = BBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?;
                boxes.push(crate::geometry::ScoredBox::ground_truth(bbox, id));
            }
            samples.insert(
                e.image_path.clone(),
                Sample {
                    id: e.image_path.clone(),
                    image: std::sync::Arc::new(load(&e.image_path)?),
                    boxes,
                    provenance: Provenance::Exemplar,
                },
            );
        }
    }
    Ok(ExemplarSet {
        manifests,
        data: Dataset::new(classes, samples.into_values().collect())?,
    })
}

/// Union of exemplar and new-class images under a seeded stable shuffle.
///
/// Classes with boxes in both sets are rejected, as are two different images
/// sharing an id. Re-merging an image already present is a no-op.
pub fn merge_with_new_data(exemplars: &Dataset, new: &Dataset, seed: u64) -> Result<Dataset> {
    if exemplars.is_empty() {
        return Ok(new.clone());
    }
    let old_present = exemplars.present_classes();
    let fresh = Dataset {
        classes: new.classes.clone(),
        samples: new
            .samples
            .iter()
            .filter(|s| s.provenance == Provenance::New)
            .cloned()
            .collect(),
    };
    if let Some(c) = fresh.present_classes().into_iter().find(|c| old_present.contains(c)) {
        return Err(Error::Vocabulary(format!("class '{c}' appears in both exemplars and new data")));
    }
    let mut vocabulary = exemplars.classes.clone();
    for c in &new.classes {
        if !vocabulary.contains(c) {
            vocabulary.push(c.clone());
        }
    }
    let tagged_exemplars = exemplars.remap_to(&vocabulary)?.with_provenance(Provenance::Exemplar);
    let mut by_id: BTreeMap<String, Sample> = BTreeMap::new();
    for s in tagged_exemplars.samples.into_iter().chain(new.remap_to(&vocabulary)?.samples) {
        match by_id.get(&s.id) {
            Some(existing) if existing.boxes == s.boxes && existing.image == s.image => {}
            Some(_) => return Err(Error::Vocabulary(format!("image id '{}' collides", s.id))),
            None => {
                by_id.insert(s.id.clone(), s);
            }
        }
    }
    let mut samples: Vec<Sample> = by_id.into_values().collect();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Dataset::new(vocabulary, samples)
}
