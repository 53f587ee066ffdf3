use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BatchSpec;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, HARD_MASK_FLOOR, SOFT_MASK_FLOOR};
use crate::model::NetworkConfig;
use crate::transform::TransformConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher-student training on labeled + unlabeled data.
    Semi,
    /// Supervised density + segmentation on the labeled pool only; no
    /// teacher, no consistency terms, no transformation layer.
    LabelOnly,
    /// `LabelOnly` trained on labeled and unlabeled pools with their labels.
    Fully,
}

impl Mode {
    pub fn uses_teacher(self) -> bool {
        matches!(self, Mode::Semi)
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(Mode::Semi),
            "label_only" => Ok(Mode::LabelOnly),
            "fully" => Ok(Mode::Fully),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Semi => "semi",
            Mode::LabelOnly => "label_only",
            Mode::Fully => "fully",
        })
    }
}

/// Which uncertainty map weights a consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Every pixel weighted equally.
    None,
    Hard,
    Soft,
}

impl MaskKind {
    pub fn denominator_floor(self) -> f64 {
        match self {
            MaskKind::None | MaskKind::Hard => HARD_MASK_FLOOR,
            MaskKind::Soft => SOFT_MASK_FLOOR,
        }
    }
}

/// Every training constant. Defaults are the full-scale values; the desk
/// benchmark overrides several of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate is divided by `lr_decay_factor` every
    /// `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub patch: usize,
    pub flip_p: f64,
    /// Stochastic teacher passes per unlabeled patch.
    pub mc_passes: usize,
    pub ema_decay: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    /// Length of the λ and threshold ramps, in epochs' worth of steps.
    pub ramp_epochs: f64,
    pub soft_weight: f64,
    pub input_noise_std: f64,
    pub gain: f64,
    pub sigma: f64,
    pub seg_mask: MaskKind,
    pub density_mask: MaskKind,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cap on labeled / unlabeled pool sizes (first N scenes kept).
    pub max_labeled: Option<usize>,
    pub max_unlabeled: Option<usize>,
    pub workers: usize,
    pub tile: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 600,
            lr: 7e-5,
            lr_decay_every: 200,
            lr_decay_factor: 5.0,
            batch_labeled: 8,
            batch_unlabeled: 8,
            patch: 128,
            flip_p: 0.3,
            mc_passes: 8,
            ema_decay: 0.999,
            alpha: 0.1,
            lambda_max: 1.0,
            ramp_epochs: 80.0,
            soft_weight: 7.0,
            input_noise_std: 0.05,
            gain: crate::transform::DEFAULT_GAIN,
            sigma: crate::data::DEFAULT_SIGMA,
            seg_mask: MaskKind::Hard,
            density_mask: MaskKind::Soft,
            patience: 100,
            max_labeled: None,
            max_unlabeled: None,
            workers: 1,
            tile: crate::eval::DEFAULT_TILE,
            network: NetworkConfig::desk_small(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("lr", self.lr),
            ("lr_decay_every", self.lr_decay_every as f64),
            ("lr_decay_factor", self.lr_decay_factor),
            ("batch_labeled", self.batch_labeled as f64),
            ("patch", self.patch as f64),
            ("mc_passes", self.mc_passes as f64),
            ("alpha", self.alpha),
            ("ramp_epochs", self.ramp_epochs),
            ("soft_weight", self.soft_weight),
            ("gain", self.gain),
            ("sigma", self.sigma),
            ("tile", self.tile as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip_p {} outside [0, 1]", self.flip_p)));
        }
        if !(self.lambda_max >= 0.0) || !(self.input_noise_std >= 0.0) {
            return Err(Error::Config("lambda_max and input_noise_std must be >= 0".into()));
        }
        if self.patch % self.network.output_stride != 0 {
            return Err(Error::Config(format!(
                "patch {} is not a multiple of the output stride {}",
                self.patch, self.network.output_stride
            )));
        }
        self.network.validate()
    }

    /// `lr / factor^floor(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn batch_spec(&self, mode: Mode) -> BatchSpec {
        BatchSpec {
            labeled: self.batch_labeled,
            unlabeled: if mode.uses_teacher() { self.batch_unlabeled } else { 0 },
            patch: self.patch,
            flip_p: self.flip_p,
        }
    }

    pub fn transform(&self) -> TransformConfig {
        TransformConfig { gain: self.gain }
    }

    pub fn loss_weights(&self, ramp_steps: u64) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda_max: self.lambda_max,
            ramp_steps: ramp_steps.max(1),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
