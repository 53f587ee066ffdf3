//! Spatial uncertainty from Monte-Carlo passes through the teacher's
//! segmentation head: entropy maps and the hard and soft masks derived from
//! them.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor};
use crate::model::{Model, ModelOutput, PerturbationConfig};

/// Maximum entropy of a two-class distribution, in nats.
pub const MAX_ENTROPY: f64 = LN_2;

pub const DEFAULT_SOFT_WEIGHT: f64 = 7.0;

const LOG_FLOOR: f64 = 1e-12;

/// `exp(-5 (1 - min(t, ramp) / ramp)^2)`.
pub fn gaussian_rampup(step: u64, ramp_steps: u64) -> f64 {
    if ramp_steps == 0 {
        return 1.0;
    }
    let x = (step.min(ramp_steps) as f64) / ramp_steps as f64;
    (-5.0 * (1.0 - x) * (1.0 - x)).exp()
}

/// Entropy threshold for the hard mask, ramped from `3/4 * i_max` at step 0
/// to `i_max` at `ramp_steps` with a Gaussian ramp shifted to start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub ramp_steps: u64,
    pub i_max: f64,
}

impl ThresholdSchedule {
    pub fn new(ramp_steps: u64) -> Self {
        ThresholdSchedule {
            ramp_steps,
            i_max: MAX_ENTROPY,
        }
    }

    /// Gaussian ramp rescaled to run from exactly 0 to exactly 1.
    pub fn ramp(&self, step: u64) -> f64 {
        let floor = (-5.0f64).exp();
        ((gaussian_rampup(step, self.ramp_steps) - floor) / (1.0 - floor)).clamp(0.0, 1.0)
    }

    pub fn threshold(&self, step: u64) -> f64 {
        self.i_max * (0.75 + 0.25 * self.ramp(step))
    }
}

/// Mean of several stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean_score: Tensor,
    pub mean_density: Grid,
}

/// Runs `passes` stochastic forward passes and averages class scores and
/// densities. Each pass gets its own generator seeded from `rng`, so the
/// result does not depend on `workers`; partial results are reduced in pass
/// order.
pub fn mc_passes<R: Rng + ?Sized>(
    teacher: &Model,
    image: &Grid,
    passes: usize,
    perturb: &PerturbationConfig,
    rng: &mut R,
    workers: usize,
) -> Result<McEstimate> {
    if passes < 1 {
        return Err(Error::Config("at least one stochastic pass is required".into()));
    }
    let seeds: Vec<u64> = (0..passes).map(|_| rng.random()).collect();
    let run = |seed: u64| -> Result<ModelOutput> {
        teacher.forward(image, perturb, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let outputs: Vec<ModelOutput> = if workers <= 1 || passes == 1 {
        seeds.iter().map(|&s| run(s)).collect::<Result<_>>()?
    } else {
        let chunk = passes.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(passes);
            for h in handles {
                all.extend(h.join().expect("MC worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let mut score = Tensor::zeros(2, outputs[0].class_score.height, outputs[0].class_score.width);
    let mut density = Grid::zeros(outputs[0].density.height(), outputs[0].density.width());
    for out in &outputs {
        score.data.iter_mut().zip(&out.class_score.data).for_each(|(a, b)| *a += b);
        density.data_mut().iter_mut().zip(out.density.data()).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / passes as f64;
    score.data.iter_mut().for_each(|v| *v *= inv);
    density.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(McEstimate {
        mean_score: score,
        mean_density: density,
    })
}

/// Arithmetic mean of `passes` stochastic softmax outputs.
pub fn mc_mean_score<R: Rng + ?Sized>(
    teacher: &Model,
    image: &Grid,
    passes: usize,
    perturb: &PerturbationConfig,
    rng: &mut R,
) -> Result<Tensor> {
    mc_passes(teacher, image, passes, perturb, rng, 1).map(|e| e.mean_score)
}

/// Per-pixel Shannon entropy `-Σ_c P_c ln P_c` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(mean_score: &Tensor) -> Result<Grid> {
    let hw = mean_score.plane_len();
    let mut out = Vec::with_capacity(hw);
    for i in 0..hw {
        let mut sum = 0.0;
        let mut ent = 0.0;
        for c in 0..mean_score.channels {
            let p = mean_score.data[c * hw + i];
            if !(p >= 0.0) {
                return Err(Error::Input(format!("negative class probability {p}")));
            }
            sum += p;
            ent -= p * p.max(LOG_FLOOR).ln();
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Input(format!(
                "class scores at pixel {i} sum to {sum}, not 1"
            )));
        }
        out.push(ent.max(0.0));
    }
    Grid::from_vec(mean_score.height, mean_score.width, out)
}

/// `Î = I / ln 2`.
pub fn normalized_entropy(entropy: &Grid) -> Grid {
    entropy.map(|v| v / MAX_ENTROPY)
}

/// `1(I < threshold)`: ones mark certain pixels.
pub fn hard_mask(entropy: &Grid, threshold: f64) -> Grid {
    entropy.map(|v| if v < threshold { 1.0 } else { 0.0 })
}

/// `M * (1 - I / ln 2)`.
pub fn soft_mask(entropy: &Grid, weight: f64) -> Result<Grid> {
    if !(weight > 0.0) || !weight.is_finite() {
        return Err(Error::Config(format!("soft-mask weight must be positive, got {weight}")));
    }
    Ok(entropy.map(|v| (weight * (1.0 - v / MAX_ENTROPY)).max(0.0)))
}

/// Everything derived from one image's MC ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub mean_score: Tensor,
    pub entropy: Grid,
    pub normalized: Grid,
    pub hard: Grid,
    pub soft: Grid,
}

impl UncertaintyBundle {
    pub fn from_mean_score(mean_score: Tensor, threshold: f64, soft_weight: f64) -> Result<Self> {
        let entropy = shannon_entropy(&mean_score)?;
        let normalized = normalized_entropy(&entropy);
        let hard = hard_mask(&entropy, threshold);
        let soft = soft_mask(&entropy, soft_weight)?;
        Ok(UncertaintyBundle {
            mean_score,
            entropy,
            normalized,
            hard,
            soft,
        })
    }
}
