//! The shared student/teacher network.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use config::{Backbone, NetworkConfig, PerturbationConfig, DEFAULT_DENSITY_UNIT};
pub use network::{count_from_density, density_target, mask_target, Model, ModelOutput, Trace};
pub use params::{Param, Params};
