//! Desk-scale incremental semantic segmentation lab.
//!
//! Models learn a sequence of pixel-classification steps, each introducing
//! new foreground classes whose pixels are the only supervised ones; old
//! classes collapse into the background label of the current step. The
//! crate provides the synthetic scenario generator, the per-pixel model
//! with explicit gradients, pseudo-labeling strategies for the collapsed
//! background, prototype replay for old classifier rows, importance-guided
//! weight consolidation between steps, and mIoU reporting.

pub mod augment;
pub mod consolidate;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod proto;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
