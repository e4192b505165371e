//! Exemplars packaged with their pixels so they travel with a snapshot.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use incdet_core::exemplar::{load_exemplars, ExemplarManifest, ExemplarSet};
use incdet_core::synth::{decode_png, encode_png};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarBundle {
    pub manifests: Vec<ExemplarManifest>,
    /// Base64 PNG per exemplar image path.
    pub images: BTreeMap<String, String>,
}

impl ExemplarBundle {
    pub fn from_set(set: &ExemplarSet) -> Result<Self> {
        let mut images = BTreeMap::new();
        for s in &set.data.samples {
            images.insert(s.id.clone(), STANDARD.encode(encode_png(&s.image)?));
        }
        Ok(ExemplarBundle {
            manifests: set.manifests.clone(),
            images,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.manifests.iter().all(|m| m.entries.is_empty())
    }

    pub fn classes(&self) -> Vec<String> {
        self.manifests.iter().map(|m| m.class_name.clone()).collect()
    }

    /// Decodes every image; pixels are 8-bit quantised.
    pub fn to_set(&self) -> Result<ExemplarSet> {
        Ok(load_exemplars(self.manifests.clone(), |path| {
            let b64 = self
                .images
                .get(path)
                .ok_or_else(|| incdet_core::Error::Empty(format!("exemplar image '{path}' missing from bundle")))?;
            let bytes = STANDARD
                .decode(b64)
                .map_err(|e| incdet_core::Error::Snapshot(format!("exemplar '{path}': {e}")))?;
            decode_png(&bytes)
        })?)
    }

    /// Adds another bundle's classes; a class present in both is an error.
    pub fn merge(mut self, other: ExemplarBundle) -> Result<Self> {
        let mine = self.classes();
        if let Some(c) = other.classes().into_iter().find(|c| mine.contains(c)) {
            return Err(PipelineError::Registry(format!("exemplars for '{c}' already stored")));
        }
        self.manifests.extend(other.manifests);
        for (k, v) in other.images {
            match self.images.get(&k) {
                Some(existing) if *existing != v => {
                    return Err(PipelineError::Registry(format!("two different exemplar images named '{k}'")))
                }
                _ => {
                    self.images.insert(k, v);
                }
            }
        }
        Ok(self)
    }
}
