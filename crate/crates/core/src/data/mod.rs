//! Scenes, ground-truth construction, file formats and batch assembly.

pub mod batch;
pub mod dataset;
pub mod density;
pub mod io;
pub mod scene;

pub use batch::{make_batch, Batch, BatchSpec, LabeledPatch, LabeledScene};
pub use dataset::{generate_dataset, split_counts, Dataset, Split, SyntheticSpec};
pub use density::{
    density_from_point_list, density_from_points, mask_from_density, BinaryMask, DensityMap,
    DEFAULT_SIGMA,
};
pub use scene::{generate_synthetic_scene, Point, Scene};
