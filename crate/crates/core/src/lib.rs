//! Desk-scale benchmark for rehearsal-free class-incremental learning.
//!
//! A single classifier grows one head block per task and is trained on each
//! task's data alone; knowledge transfer losses (prediction and feature
//! distillation, weight anchoring with or without Fisher curvature) fight
//! the forgetting that follows. Everything runs on a small hand-rolled f64
//! autodiff tape so results are exactly reproducible from a seed, and the
//! analysis side measures what was lost: accuracy matrices, forgetting
//! scores, and CKA drift of intermediate representations.

pub mod cka;
pub mod container;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
