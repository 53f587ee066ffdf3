//! Differentiable density-to-segmentation transformation layer.
//!
//! `M_AB = 2 * sigmoid(K * M_D) - 1`, which for non-negative densities maps
//! zero to zero and anything noticeably positive to (almost) one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_GAIN: f64 = 6000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// The gain `K`.
    pub gain: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig { gain: DEFAULT_GAIN }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::Config(format!("transform gain must be positive, got {}", self.gain)));
        }
        Ok(())
    }
}

/// `2 * sigmoid(k x) - 1` for `x >= 0`, written as `(1 - e) / (1 + e)` with
/// `e = exp(-k x)` so it neither overflows nor cancels near zero.
#[inline]
pub fn transform_scalar(x: f64, gain: f64) -> f64 {
    let e = (-gain * x).exp();
    (1.0 - e) / (1.0 + e)
}

/// `d/dx [2 * sigmoid(k x) - 1] = 2k s (1 - s)`, i.e. `2k e / (1 + e)^2`.
#[inline]
pub fn transform_scalar_derivative(x: f64, gain: f64) -> f64 {
    let e = (-gain * x).exp();
    2.0 * gain * e / ((1.0 + e) * (1.0 + e))
}

fn check_non_negative(density: &Grid) -> Result<()> {
    if let Some(v) = density.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Input(format!(
            "transformation layer expects non-negative density, got {v}"
        )));
    }
    Ok(())
}

pub fn approx_segmentation(density: &Grid, cfg: &TransformConfig) -> Result<Grid> {
    cfg.validate()?;
    check_non_negative(density)?;
    Ok(density.map(|x| transform_scalar(x, cfg.gain)))
}

pub fn transform_gradient(density: &Grid, cfg: &TransformConfig) -> Result<Grid> {
    cfg.validate()?;
    check_non_negative(density)?;
    Ok(density.map(|x| transform_scalar_derivative(x, cfg.gain)))
}
