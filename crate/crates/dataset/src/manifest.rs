//! The purified dataset as written to disk.

use std::path::Path;
use std::sync::Arc;

use incdet_core::data::{Dataset, Provenance, Sample};
use incdet_core::geometry::{BBox, ScoredBox};
use incdet_core::tensor::Tensor3;
use incdet_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::providers::LabelScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub thr_b: f64,
    pub thr_d: f64,
    pub thr_o: f64,
    pub k: usize,
    pub provider: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class: String,
    pub accs: f64,
    /// Credible labels that contributed to `accs`.
    pub labels: Vec<LabelScore>,
}

impl ManifestBox {
    pub fn bbox(&self) -> BBox {
        BBox {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<ManifestBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub config: ManifestConfig,
    pub images: Vec<ManifestImage>,
}

impl DatasetManifest {
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            if img.boxes.is_empty() {
                return Err(Error::Config(format!("manifest image '{}' has no boxes", img.path)));
            }
            for b in &img.boxes {
                if !self.classes.contains(&b.class) {
                    return Err(Error::Vocabulary(format!("manifest box class '{}' is not declared", b.class)));
                }
                if !b.bbox().is_valid() || b.bbox().area() <= 0.0 {
                    return Err(Error::InvalidBox(format!("manifest box in '{}'", img.path)));
                }
            }
        }
        Ok(())
    }

    /// Loads every image through `load` into a training set whose sample ids
    /// are the manifest paths.
    pub fn to_dataset(&self, load: impl Fn(&str) -> Result<Tensor3>) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let image = load(&img.path)?;
            if image.width != img.width || image.height != img.height {
                return Err(Error::Shape(format!("image '{}' does not match its manifest size", img.path)));
            }
            let boxes = img
                .boxes
                .iter()
                .map(|b| {
                    let class = self.classes.iter().position(|c| *c == b.class).expect("validated class");
                    ScoredBox::ground_truth(b.bbox(), class)
                })
                .collect();
            samples.push(Sample {
                id: img.path.clone(),
                image: Arc::new(image),
                boxes,
                provenance: Provenance::New,
            });
        }
        Dataset::new(self.classes.clone(), samples)
    }
}
