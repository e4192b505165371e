#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use incdet_dataset::fixture::{write_fixture, FixtureSpec};
use incdet_pipeline::learn::train_base;
use incdet_pipeline::registry::Registry;
use incdet_pipeline::PipelineConfig;

pub struct World {
    pub corpus: PathBuf,
    pub base_registry: PathBuf,
    pub base_hash: String,
}

/// Small settings so the suite stays quick.
pub fn small_config(corpus: &Path, registry: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(7);
    cfg.corpus = corpus.to_path_buf();
    cfg.registry = registry.to_path_buf();
    cfg.base.images_per_class = 30;
    cfg.base.epochs = 3;
    cfg.distill.epochs = 2;
    cfg.build.images = 40;
    cfg.exemplars_per_class = 3;
    cfg
}

/// Fixture corpus and a trained base registry, built once per test binary.
pub fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let corpus = root.join("corpus");
        write_fixture(&corpus, &FixtureSpec::default()).unwrap();
        let base_registry = root.join("base_registry");
        let reg = Registry::open(&base_registry).unwrap();
        let base_hash = train_base(&small_config(&corpus, &base_registry), &reg, None).unwrap();
        World {
            corpus,
            base_registry,
            base_hash,
        }
    })
}

pub fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}

/// A private copy of the base registry.
pub fn fresh_registry(dir: &Path) -> Registry {
    let w = world();
    copy_dir(&w.base_registry, dir);
    Registry::open(dir).unwrap()
}
