//! Class-incremental learning for a toy one-stage object detector.
//!
//! The crate covers the full loop: a RetinaNet-shaped detector trained with
//! hand-written backpropagation, distillation-based incremental training that
//! adds classes without old-class data, exemplar rehearsal, automatic dataset
//! construction from noisy images, and VOC-style evaluation.

pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod exemplar;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod optim;
pub mod scenario;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
