//! In-memory labelled image sets used for training and evaluation.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{validate_ground_truth, ScoredBox};
use crate::tensor::Tensor3;

/// Where a training image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Data for the classes being learned now.
    New,
    /// Stored old-class rehearsal image.
    Exemplar,
}

/// One image with its ground truth; `boxes[i].class_id` indexes the owning
/// [`Dataset::classes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Tensor3>,
    pub boxes: Vec<ScoredBox>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset { classes, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::Vocabulary("duplicate class names in dataset".into()));
        }
        for s in &self.samples {
            for b in &s.boxes {
                validate_ground_truth(b)?;
                if b.class_id >= self.classes.len() {
                    return Err(Error::Vocabulary(format!(
                        "sample '{}' uses class id {} outside a {}-class vocabulary",
                        s.id,
                        b.class_id,
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class names that actually occur in some box.
    pub fn present_classes(&self) -> Vec<String> {
        let ids: BTreeSet<usize> = self
            .samples
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| b.class_id))
            .collect();
        ids.into_iter().map(|i| self.classes[i].clone()).collect()
    }

    /// Rewrites class ids into `vocabulary`, failing on unknown names.
    pub fn remap_to(&self, vocabulary: &[String]) -> Result<Dataset> {
        let map: Vec<Option<usize>> = self
            .classes
            .iter()
            .map(|c| vocabulary.iter().position(|v| v == c))
            .collect();
        let mut samples = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let mut s2 = s.clone();
            for b in &mut s2.boxes {
                b.class_id = map[b.class_id].ok_or_else(|| {
                    Error::Vocabulary(format!(
                        "class '{}' is not in the model vocabulary",
                        self.classes[b.class_id]
                    ))
                })?;
            }
            samples.push(s2);
        }
        Ok(Dataset {
            classes: vocabulary.to_vec(),
            samples,
        })
    }

    /// Keeps only boxes of the named classes and drops images left without boxes.
    pub fn restrict_to(&self, keep: &[String]) -> Dataset {
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                let boxes: Vec<ScoredBox> = s
                    .boxes
                    .iter()
                    .filter(|b| keep.contains(&self.classes[b.class_id]))
                    .copied()
                    .collect();
                (!boxes.is_empty()).then(|| Sample { boxes, ..s.clone() })
            })
            .collect();
        Dataset {
            classes: self.classes.clone(),
            samples,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Dataset {
        for s in &mut self.samples {
            s.provenance = provenance;
        }
        self
    }
}
