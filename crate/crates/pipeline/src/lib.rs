//! Edge and edge-cloud orchestration of incremental learning: the trigger,
//! dataset build, training, model transfer and the model registry.

pub mod bundle;
pub mod config;
pub mod error;
pub mod learn;
pub mod registry;
pub mod service;
pub mod task;
pub mod timing;
pub mod trigger;

pub use config::{Mode, PipelineConfig};
pub use error::{PipelineError, Result};
