//! Semi-supervised crowd counting with an uncertainty-aware mean teacher.
//!
//! A two-head network predicts a density map and a crowd/background
//! segmentation. Unlabeled images are routed through an EMA teacher whose
//! Monte-Carlo dropout ensemble yields consistency targets and entropy-based
//! uncertainty maps that weight the consistency losses.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod model;
pub mod presets;
pub mod rng;
pub mod trainer;
pub mod transform;
pub mod uncertainty;

pub use error::{Error, Result};
pub use grid::{Grid, Tensor};
