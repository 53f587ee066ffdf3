use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four 3x3 conv stages (16, 32, 32, 64), stride 4.
    DeskSmall,
    /// The first ten 3x3 conv layers of VGG-16, stride 8.
    Vgg16Truncated,
    /// Any other stage list, used mostly by tests.
    Custom,
}

/// Architecture of the shared student/teacher network.
///
/// The feature extractor is a chain of 3x3 conv + ReLU stages. A 2x2 max
/// pool follows every stage listed in `pool_after`, and the two dropout
/// sites follow the stages in `dropout_after`. Two 1x1 heads read the final
/// features: a 2-way softmax segmentation head and a ReLU density head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    pub dropout_rate: f64,
    pub channels: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub dropout_after: [usize; 2],
    pub output_stride: usize,
    /// Units of the density head: it predicts `density_unit` times the
    /// people-per-pixel density.
    #[serde(default = "default_density_unit")]
    pub density_unit: f64,
}

pub const DEFAULT_DENSITY_UNIT: f64 = 1000.0;

fn default_density_unit() -> f64 {
    DEFAULT_DENSITY_UNIT
}

impl NetworkConfig {
    pub fn desk_small() -> Self {
        NetworkConfig {
            backbone: Backbone::DeskSmall,
            dropout_rate: 0.5,
            channels: vec![16, 32, 32, 64],
            pool_after: vec![0, 1],
            dropout_after: [1, 2],
            output_stride: 4,
            density_unit: DEFAULT_DENSITY_UNIT,
        }
    }

    pub fn vgg16_truncated() -> Self {
        NetworkConfig {
            backbone: Backbone::Vgg16Truncated,
            dropout_rate: 0.5,
            channels: vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512],
            pool_after: vec![1, 3, 6],
            dropout_after: [6, 9],
            output_stride: 8,
            density_unit: DEFAULT_DENSITY_UNIT,
        }
    }

    /// Two conv stages of a few channels; small enough for finite differences.
    pub fn tiny() -> Self {
        NetworkConfig {
            backbone: Backbone::Custom,
            dropout_rate: 0.5,
            channels: vec![3, 4],
            pool_after: vec![0],
            dropout_after: [0, 1],
            output_stride: 2,
            density_unit: DEFAULT_DENSITY_UNIT,
        }
    }

    pub fn for_backbone(backbone: Backbone) -> Self {
        match backbone {
            Backbone::DeskSmall => Self::desk_small(),
            Backbone::Vgg16Truncated => Self::vgg16_truncated(),
            Backbone::Custom => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.density_unit > 0.0) || !self.density_unit.is_finite() {
            return Err(Error::Config(format!(
                "density unit must be positive, got {}",
                self.density_unit
            )));
        }
        let n = self.channels.len();
        if n == 0 || self.channels.contains(&0) {
            return Err(Error::Config("every stage needs at least one channel".into()));
        }
        if self.pool_after.iter().any(|&i| i >= n) || self.dropout_after.iter().any(|&i| i >= n)
        {
            return Err(Error::Config("pool/dropout site refers to a missing stage".into()));
        }
        if self.dropout_after[0] == self.dropout_after[1] {
            return Err(Error::Config("the two dropout sites must be distinct".into()));
        }
        let mut pools = self.pool_after.clone();
        pools.sort_unstable();
        pools.dedup();
        if pools.len() != self.pool_after.len() {
            return Err(Error::Config("duplicate pooling site".into()));
        }
        if self.output_stride != 1 << pools.len() {
            return Err(Error::Config(format!(
                "output stride {} does not match {} pooling stages",
                self.output_stride,
                pools.len()
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk_small()
    }
}

/// Stochastic perturbations applied during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Std of zero-mean Gaussian noise added to input intensities.
    pub input_noise_std: f64,
    pub dropout_active: bool,
}

impl PerturbationConfig {
    /// Deterministic inference: no noise, dropout off.
    pub const EVAL: PerturbationConfig = PerturbationConfig {
        input_noise_std: 0.0,
        dropout_active: false,
    };

    pub fn stochastic(input_noise_std: f64) -> Self {
        PerturbationConfig {
            input_noise_std,
            dropout_active: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.input_noise_std >= 0.0) || !self.input_noise_std.is_finite() {
            return Err(Error::Config(format!(
                "input noise std {} must be finite and >= 0",
                self.input_noise_std
            )));
        }
        Ok(())
    }
}
