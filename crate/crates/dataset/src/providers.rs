//! Pluggable sources of images, box proposals, labels and label similarity.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use incdet_core::detector::DetectorModel;
use incdet_core::geometry::{nms, BBox, ScoredBox};
use incdet_core::synth::load_png;
use incdet_core::tensor::Tensor3;
use incdet_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// A downloaded or indexed candidate image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub source_id: String,
    /// Path relative to the source root; doubles as the image id.
    pub path: String,
    pub image: Arc<Tensor3>,
}

pub trait ImageSource: Send + Sync {
    fn id(&self) -> String;
    /// Up to `count` images for `query`, in a stable order. Unreadable
    /// images are skipped.
    fn fetch(&self, query: &str, count: usize) -> Result<Vec<SourceImage>>;
}

/// Images indexed by query in `<root>/index.json`: `{"query": ["a.png", ...]}`.
#[derive(Debug, Clone)]
pub struct LocalIndexSource {
    pub root: PathBuf,
}

impl LocalIndexSource {
    pub const INDEX_FILE: &'static str = "index.json";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalIndexSource { root: root.into() }
    }

    pub fn index(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let raw = std::fs::read(self.root.join(Self::INDEX_FILE))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    pub fn load(&self, path: &str) -> Result<Tensor3> {
        load_png(&self.root.join(path))
    }
}

impl ImageSource for LocalIndexSource {
    fn id(&self) -> String {
        format!("local:{}", self.root.display())
    }

    fn fetch(&self, query: &str, count: usize) -> Result<Vec<SourceImage>> {
        if count == 0 {
            return Err(Error::Config("image count must be at least 1".into()));
        }
        let index = self.index()?;
        let files = index
            .get(query)
            .ok_or_else(|| Error::Provider(format!("no images indexed for '{query}'")))?;
        if files.len() < count {
            log::warn!("only {} images indexed for '{query}', {count} requested", files.len());
        }
        let mut out = Vec::new();
        for path in files.iter().take(count) {
            match self.load(path) {
                Ok(image) => out.push(SourceImage {
                    source_id: self.id(),
                    path: path.clone(),
                    image: Arc::new(image),
                }),
                Err(e) => log::warn!("skipping '{path}': {e}"),
            }
        }
        if out.is_empty() {
            return Err(Error::Provider(format!("no readable images for '{query}'")));
        }
        Ok(out)
    }
}

/// Images held in memory, indexed by query.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: BTreeMap<String, Vec<SourceImage>>,
}

impl ImageSource for MemorySource {
    fn id(&self) -> String {
        "memory".into()
    }

    fn fetch(&self, query: &str, count: usize) -> Result<Vec<SourceImage>> {
        if count == 0 {
            return Err(Error::Config("image count must be at least 1".into()));
        }
        let found: Vec<SourceImage> = self.images.get(query).into_iter().flatten().take(count).cloned().collect();
        if found.is_empty() {
            return Err(Error::Provider(format!("no images for '{query}'")));
        }
        Ok(found)
    }
}

pub trait ProposalProvider: Send + Sync {
    fn id(&self) -> String;
    fn propose(&self, image: &SourceImage) -> Vec<BBox>;
}

/// Class-agnostic proposals from a trained detector run at a low score
/// threshold.
#[derive(Debug, Clone)]
pub struct DetectorProposals {
    pub model: Arc<DetectorModel>,
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl DetectorProposals {
    pub const DEFAULT_THRESHOLD: f64 = 0.2;

    pub fn new(model: Arc<DetectorModel>) -> Self {
        DetectorProposals {
            model,
            score_threshold: Self::DEFAULT_THRESHOLD,
            nms_threshold: 0.5,
        }
    }
}

impl ProposalProvider for DetectorProposals {
    fn id(&self) -> String {
        format!("deep@{}", self.score_threshold)
    }

    fn propose(&self, image: &SourceImage) -> Vec<BBox> {
        let agnostic: Vec<ScoredBox> = self
            .model
            .candidates(&image.image, self.score_threshold, Some(300))
            .into_iter()
            .map(|c| ScoredBox { class_id: 0, ..c })
            .filter(|c| c.bbox.area() > 0.0)
            .collect();
        nms(&agnostic, self.nms_threshold).into_iter().map(|c| c.bbox).collect()
    }
}

/// Edge-style class-agnostic proposals: bright connected regions, each
/// offered tight and loosely padded, plus the union of every pair.
#[derive(Debug, Clone)]
pub struct RegionProposals {
    pub max_boxes: usize,
    /// Pixels above this value are foreground.
    pub threshold: f64,
    pub min_pixels: usize,
    pub padding: f64,
}

impl Default for RegionProposals {
    fn default() -> Self {
        RegionProposals {
            max_boxes: 20,
            threshold: 0.5,
            min_pixels: 6,
            padding: 4.0,
        }
    }
}

fn components(img: &Tensor3, threshold: f64) -> Vec<(BBox, usize)> {
    let (w, h) = (img.width, img.height);
    let fg = |x: usize, y: usize| (0..img.channels).any(|c| img.at(c, y, x) > threshold);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !fg(sx, sy) {
                continue;
            }
            let mut stack = vec![(sx, sy)];
            seen[sy * w + sx] = true;
            let (mut x0, mut y0, mut x1, mut y1, mut n) = (sx, sy, sx, sy, 0usize);
            while let Some((x, y)) = stack.pop() {
                n += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let neighbours = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbours {
                    if nx < w && ny < h && !seen[ny * w + nx] && fg(nx, ny) {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                }
            }
            let b = BBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x1 + 1) as f64,
                y_max: (y1 + 1) as f64,
            };
            out.push((b, n));
        }
    }
    out
}

impl ProposalProvider for RegionProposals {
    fn id(&self) -> String {
        format!("region@{}", self.max_boxes)
    }

    fn propose(&self, image: &SourceImage) -> Vec<BBox> {
        let img = image.image.as_ref();
        let (w, h) = (img.width as f64, img.height as f64);
        let mut regions = components(img, self.threshold);
        regions.retain(|(_, n)| *n >= self.min_pixels);
        regions.sort_by(|a, b| b.1.cmp(&a.1));
        let mut out: Vec<BBox> = Vec::new();
        for (b, _) in &regions {
            out.push(*b);
        }
        for (b, _) in &regions {
            let p = self.padding;
            out.push(
                BBox {
                    x_min: b.x_min - p,
                    y_min: b.y_min - p,
                    x_max: b.x_max + p,
                    y_max: b.y_max + p,
                }
                .clip(w, h),
            );
        }
        // unions of neighbouring regions stand in for the loose multi-object
        // boxes an edge-based method produces
        for i in 0..regions.len() {
            for j in i + 1..regions.len() {
                let (a, b) = (regions[i].0, regions[j].0);
                out.push(BBox {
                    x_min: a.x_min.min(b.x_min),
                    y_min: a.y_min.min(b.y_min),
                    x_max: a.x_max.max(b.x_max),
                    y_max: a.y_max.max(b.y_max),
                });
            }
        }
        out.retain(|b| b.area() > 0.0);
        out.truncate(self.max_boxes);
        out
    }
}

/// Fixed proposals per image path.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProposals {
    pub boxes: HashMap<String, Vec<BBox>>,
}

impl ProposalProvider for ScriptedProposals {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn propose(&self, image: &SourceImage) -> Vec<BBox> {
        self.boxes.get(&image.path).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub name: String,
    pub score: f64,
}

pub trait ClassifierProvider: Send + Sync {
    /// Top-`k` labels of the crop, by descending score.
    fn classify(&self, image: &SourceImage, bbox: &BBox, k: usize) -> Vec<LabelScore>;
}

/// Fixed labels per (image path, box) pair.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClassifier {
    entries: Vec<(String, BBox, Vec<LabelScore>)>,
}

impl ScriptedClassifier {
    pub fn with(mut self, path: &str, bbox: BBox, labels: &[(&str, f64)]) -> Self {
        let labels = labels
            .iter()
            .map(|(n, s)| LabelScore {
                name: n.to_string(),
                score: *s,
            })
            .collect();
        self.entries.push((path.to_string(), bbox, labels));
        self
    }
}

impl ClassifierProvider for ScriptedClassifier {
    fn classify(&self, image: &SourceImage, bbox: &BBox, k: usize) -> Vec<LabelScore> {
        let mut labels = self
            .entries
            .iter()
            .find(|(p, b, _)| *p == image.path && b == bbox)
            .map(|(_, _, l)| l.clone())
            .unwrap_or_default();
        labels.sort_by(|a, b| b.score.total_cmp(&a.score));
        labels.truncate(k);
        labels
    }
}

/// Nearest-centroid crop classifier with softmax confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    /// Crops are resampled to `side x side` before comparison.
    pub side: usize,
    pub temperature: f64,
    /// Labels scoring below this are not reported.
    #[serde(default)]
    pub min_score: f64,
    pub labels: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
}

impl CentroidClassifier {
    /// Resampled crop intensities (area averaging per cell) scaled so the
    /// brightest cell is 1.
    pub fn features(image: &Tensor3, bbox: &BBox, side: usize) -> Vec<f64> {
        let b = bbox.clip(image.width as f64, image.height as f64);
        let mut out = Vec::with_capacity(side * side);
        for gy in 0..side {
            for gx in 0..side {
                let cx0 = b.x_min + b.width() * gx as f64 / side as f64;
                let cx1 = b.x_min + b.width() * (gx + 1) as f64 / side as f64;
                let cy0 = b.y_min + b.height() * gy as f64 / side as f64;
                let cy1 = b.y_min + b.height() * (gy + 1) as f64 / side as f64;
                let (mut sum, mut wsum) = (0.0, 0.0);
                for y in cy0.floor() as usize..(cy1.ceil() as usize).min(image.height) {
                    let oy = (cy1.min(y as f64 + 1.0) - cy0.max(y as f64)).max(0.0);
                    for x in cx0.floor() as usize..(cx1.ceil() as usize).min(image.width) {
                        let ox = (cx1.min(x as f64 + 1.0) - cx0.max(x as f64)).max(0.0);
                        let wgt = ox * oy;
                        let v: f64 = (0..image.channels).map(|c| image.at(c, y, x)).sum::<f64>() / image.channels as f64;
                        sum += wgt * v;
                        wsum += wgt;
                    }
                }
                out.push(if wsum > 0.0 { sum / wsum } else { 0.0 });
            }
        }
        let top = out.iter().cloned().fold(0.0, f64::max).max(1e-6);
        out.iter_mut().for_each(|v| *v /= top);
        out
    }

    /// Centroids from labelled crops.
    pub fn fit(crops: &[(String, Arc<Tensor3>, BBox)], side: usize, temperature: f64) -> Result<Self> {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, img, b) in crops {
            let f = Self::features(img, b, side);
            let e = sums.entry(label.clone()).or_insert_with(|| (vec![0.0; f.len()], 0));
            e.0.iter_mut().zip(&f).for_each(|(s, v)| *s += v);
            e.1 += 1;
        }
        if sums.is_empty() {
            return Err(Error::Empty("no crops to fit the classifier".into()));
        }
        let (labels, centroids) = sums
            .into_iter()
            .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
            .unzip();
        Ok(CentroidClassifier {
            side,
            temperature,
            min_score: 0.0,
            labels,
            centroids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl ClassifierProvider for CentroidClassifier {
    fn classify(&self, image: &SourceImage, bbox: &BBox, k: usize) -> Vec<LabelScore> {
        if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
            return Vec::new();
        }
        let f = Self::features(&image.image, bbox, self.side);
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (f.len() as f64 * self.temperature))
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        let mut scored: Vec<LabelScore> = self
            .labels
            .iter()
            .zip(exp)
            .map(|(n, e)| LabelScore {
                name: n.clone(),
                score: e / z,
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
        scored.retain(|l| l.score >= self.min_score);
        scored.truncate(k);
        scored
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Cosine similarity of two label strings; `None` if either is out of
    /// vocabulary.
    fn similarity(&self, a: &str, b: &str) -> Option<f64>;
}

/// Word vectors loaded from a text file with lines `word v1 v2 ...`.
/// Labels are embedded as the mean of their words' vectors; separators
/// (whitespace, commas, underscores, hyphens) split words.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVectors {
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("embedding line {}: {e}", n + 1)))?;
            if v.is_empty() || dim.is_some_and(|d| d != v.len()) {
                return Err(Error::Config(format!("embedding line {} has a wrong dimension", n + 1)));
            }
            dim = Some(v.len());
            vectors.insert(word.to_lowercase(), v);
        }
        Ok(WordVectors { vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Mean of the words' vectors; `None` if any word is unknown.
    pub fn embed(&self, label: &str) -> Option<Vec<f64>> {
        let words: Vec<String> = label
            .split(|c: char| c.is_whitespace() || c == ',' || c == '_' || c == '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return None;
        }
        let mut sum: Option<Vec<f64>> = None;
        for w in &words {
            let v = self.vectors.get(w)?;
            match &mut sum {
                None => sum = Some(v.clone()),
                Some(s) => s.iter_mut().zip(v).for_each(|(a, b)| *a += b),
            }
        }
        sum.map(|s| s.into_iter().map(|x| x / words.len() as f64).collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl EmbeddingProvider for WordVectors {
    fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine(&self.embed(a)?, &self.embed(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(data: Vec<f64>, w: usize, h: usize) -> SourceImage {
        SourceImage {
            source_id: "t".into(),
            path: "p".into(),
            image: Arc::new(Tensor3::from_vec(1, h, w, data).unwrap()),
        }
    }

    #[test]
    fn word_vectors() {
        let wv = WordVectors::parse("crock 1 0\npot 1 0\npressure 0 1\ncooker 0.5 0.5\n").unwrap();
        assert!((wv.similarity("crock pot", "crock").unwrap() - 1.0).abs() < 1e-12);
        assert!(wv.similarity("crock", "pressure").unwrap().abs() < 1e-12);
        assert_eq!(wv.similarity("crock", "unknown"), None);
        assert!(WordVectors::parse("a 1 2\nb 1\n").is_err());
    }

    #[test]
    fn region_proposals_find_blobs() {
        let mut data = vec![0.1; 100];
        for y in 2..5 {
            for x in 3..7 {
                data[y * 10 + x] = 0.9;
            }
        }
        let boxes = RegionProposals::default().propose(&img(data, 10, 10));
        assert_eq!(boxes[0], BBox::new(3.0, 2.0, 7.0, 5.0).unwrap());
        assert!(boxes.len() <= 20);
        assert_eq!(boxes.len(), 2);
    }

    #[test]
    fn centroid_classifier_separates_patterns() {
        let full = Arc::new(Tensor3::from_vec(1, 4, 4, vec![1.0; 16]).unwrap());
        let mut half = vec![0.0; 16];
        half[..8].iter_mut().for_each(|v| *v = 1.0);
        let half = Arc::new(Tensor3::from_vec(1, 4, 4, half).unwrap());
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let clf = CentroidClassifier::fit(&[("top".into(), half.clone(), b), ("flat".into(), full, b)], 2, 1.0).unwrap();
        let src = SourceImage {
            source_id: "t".into(),
            path: "x".into(),
            image: half,
        };
        let top = clf.classify(&src, &b, 2);
        assert_eq!(top[0].name, "top");
        assert!(top[0].score > top[1].score);
        assert!((top.iter().map(|l| l.score).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
