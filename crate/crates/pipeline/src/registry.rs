//! Content-addressed model store with an atomically replaced `current`
//! pointer.
//!
//! Layout: `snapshots/<hash>.bin`, `exemplars/<hash>.json`, `current`
//! (the active hash), `tasks/<id>/` (per-task artifacts) and a `lock` file
//! held by the single task allowed to change the store.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use incdet_core::detector::snapshot;
use incdet_core::detector::DetectorModel;

use crate::bundle::ExemplarBundle;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

/// The active model.
#[derive(Debug, Clone)]
pub struct Active {
    pub hash: String,
    pub bytes: Vec<u8>,
    pub model: DetectorModel,
}

/// Exclusive right to change the registry; released on drop.
#[derive(Debug)]
pub struct RegistryLock {
    path: PathBuf,
}

impl Drop for RegistryLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in ["snapshots", "exemplars", "tasks"] {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<RegistryLock> {
        let path = self.root.join("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RegistryLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Registry(
                "another learning task holds the registry lock".into(),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub fn snapshot_path(&self, hash: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{hash}.bin"))
    }

    fn exemplar_path(&self, hash: &str) -> PathBuf {
        self.root.join("exemplars").join(format!("{hash}.json"))
    }

    pub fn task_dir(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join("tasks").join(id);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Stores a snapshot and its exemplars without activating them.
    pub fn publish(&self, bytes: &[u8], exemplars: &ExemplarBundle) -> Result<String> {
        let hash = snapshot::content_hash(bytes);
        write_atomic(&self.exemplar_path(&hash), &serde_json::to_vec(exemplars)?)?;
        write_atomic(&self.snapshot_path(&hash), bytes)?;
        Ok(hash)
    }

    pub fn activate(&self, hash: &str) -> Result<()> {
        let bytes = self.load_bytes(hash)?;
        if snapshot::content_hash(&bytes) != hash {
            return Err(PipelineError::Registry(format!("snapshot {hash} does not match its name")));
        }
        write_atomic(&self.root.join("current"), hash.as_bytes())
    }

    pub fn current_hash(&self) -> Result<Option<String>> {
        match fs::read_to_string(self.root.join("current")) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn load_bytes(&self, hash: &str) -> Result<Vec<u8>> {
        fs::read(self.snapshot_path(hash))
            .map_err(|e| PipelineError::Registry(format!("snapshot {hash} unavailable: {e}")))
    }

    pub fn load_exemplars(&self, hash: &str) -> Result<ExemplarBundle> {
        match fs::read(self.exemplar_path(hash)) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ExemplarBundle::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn current(&self) -> Result<Option<Active>> {
        let Some(hash) = self.current_hash()? else { return Ok(None) };
        let bytes = self.load_bytes(&hash)?;
        let model = snapshot::from_bytes(&bytes)?;
        Ok(Some(Active { hash, bytes, model }))
    }

    pub fn require_current(&self) -> Result<Active> {
        self.current()?
            .ok_or_else(|| PipelineError::Registry("no active model; run train-base first".into()))
    }
}
