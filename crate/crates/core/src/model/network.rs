//! Forward and backward passes of the two-head counting network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor};
use crate::model::config::{NetworkConfig, PerturbationConfig};
use crate::model::layers::{
    conv_backward, conv_forward, maxpool2_backward, maxpool2_forward, relu_backward_in_place,
    relu_in_place,
};
use crate::model::params::{Params, DENSITY_HEAD, SEG_HEAD};

/// Output of one forward pass at `1 / output_stride` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Softmax class scores, channel 0 = background, channel 1 = crowd.
    pub class_score: Tensor,
    /// Non-negative density in units of `density_unit` people per input
    /// pixel.
    pub density: Grid,
}

impl ModelOutput {
    /// The crowd channel of the class score.
    pub fn crowd_prob(&self) -> &[f64] {
        self.class_score.channel(1)
    }

    pub fn crowd_prob_grid(&self) -> Grid {
        self.class_score.channel_grid(1)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.density.shape()
    }
}

/// Converts a stride-resolution density map to a full-resolution count.
///
/// Each output cell holds the mean per-pixel density of the
/// `stride × stride` block it covers, in `density_unit` units, so the count
/// is the sum times `stride² / density_unit`.
pub fn count_from_density(density: &Grid, config: &NetworkConfig) -> f64 {
    let s = config.output_stride as f64;
    density.sum() * s * s / config.density_unit
}

/// Downsamples a full-resolution people-per-pixel density map to the
/// prediction grid and units while preserving [`count_from_density`]:
/// block sums divided by the block area, times `density_unit`.
pub fn density_target(density: &Grid, config: &NetworkConfig) -> Result<Grid> {
    let s = config.output_stride;
    let k = config.density_unit / (s * s) as f64;
    Ok(density.sum_pool(s)?.map(|v| v * k))
}

/// Downsamples a binary mask: a cell is crowd if any of its pixels is.
pub fn mask_target(mask: &Grid, output_stride: usize) -> Result<Grid> {
    mask.max_pool(output_stride)
}

struct StageTrace {
    input_shape: (usize, usize, usize),
    cols: Vec<f64>,
    relu_out: Tensor,
    pool_arg: Option<Vec<u32>>,
    dropout_mask: Option<Vec<f64>>,
}

/// Activations retained for the backward pass.
pub struct Trace {
    stages: Vec<StageTrace>,
    features: Tensor,
    class_score: Tensor,
    density_pre: Vec<f64>,
}

/// A network architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: Params,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.ensure_same_layout(&Params::zeros(&config))?;
        Ok(Model { config, params })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        image: &Grid,
        perturb: &PerturbationConfig,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        self.run(image, perturb, rng, false).map(|(out, _)| out)
    }

    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        image: &Grid,
        perturb: &PerturbationConfig,
        rng: &mut R,
    ) -> Result<(ModelOutput, Trace)> {
        self.run(image, perturb, rng, true)
            .map(|(out, trace)| (out, trace.expect("trace requested")))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        image: &Grid,
        perturb: &PerturbationConfig,
        rng: &mut R,
        keep: bool,
    ) -> Result<(ModelOutput, Option<Trace>)> {
        perturb.validate()?;
        let stride = self.config.output_stride;
        let (h, w) = image.shape();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by output stride {stride}"
            )));
        }

        let mut x = Tensor::from_grid(image);
        if perturb.input_noise_std > 0.0 {
            let noise = Normal::new(0.0, perturb.input_noise_std)
                .map_err(|e| Error::Config(e.to_string()))?;
            x.data.iter_mut().for_each(|v| *v += noise.sample(rng));
        }

        let tensors = self.params.tensors();
        let mut stages = Vec::with_capacity(self.config.channels.len());
        for (i, &out_c) in self.config.channels.iter().enumerate() {
            let input_shape = x.shape();
            let (mut y, cols) =
                conv_forward(&x, &tensors[2 * i].data, &tensors[2 * i + 1].data, out_c, 3);
            relu_in_place(&mut y);
            let relu_out = if keep { y.clone() } else { Tensor::zeros(0, 0, 0) };
            let pool_arg = if self.config.pool_after.contains(&i) {
                let (pooled, arg) = maxpool2_forward(&y);
                y = pooled;
                Some(arg)
            } else {
                None
            };
            let dropout_mask = if perturb.dropout_active
                && self.config.dropout_rate > 0.0
                && self.config.dropout_after.contains(&i)
            {
                let keep_p = 1.0 - self.config.dropout_rate;
                let scale = 1.0 / keep_p;
                let mask: Vec<f64> = (0..y.data.len())
                    .map(|_| if rng.random::<f64>() < keep_p { scale } else { 0.0 })
                    .collect();
                y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Some(mask)
            } else {
                None
            };
            if keep {
                stages.push(StageTrace {
                    input_shape,
                    cols,
                    relu_out,
                    pool_arg,
                    dropout_mask,
                });
            }
            x = y;
        }

        let n = self.config.channels.len();
        let seg = 2 * n + 2 * SEG_HEAD;
        let den = 2 * n + 2 * DENSITY_HEAD;
        let (logits, _) = conv_forward(&x, &tensors[seg].data, &tensors[seg + 1].data, 2, 1);
        let class_score = softmax2(&logits);
        let (pre, _) = conv_forward(&x, &tensors[den].data, &tensors[den + 1].data, 1, 1);
        let density = Grid::from_vec(pre.height, pre.width, pre.data.iter().map(|v| v.max(0.0)).collect())?;

        let out = ModelOutput {
            class_score: class_score.clone(),
            density,
        };
        let trace = keep.then(|| Trace {
            stages,
            features: x,
            class_score,
            density_pre: pre.data,
        });
        Ok((out, trace))
    }

    /// Backpropagates output gradients and accumulates them into `grads`.
    ///
    /// `d_score` is dL/dP over both class channels and `d_density` is
    /// dL/dM_D, both at prediction resolution.
    pub fn backward(&self, trace: &Trace, d_score: &Tensor, d_density: &Grid, grads: &mut Params) {
        let n = self.config.channels.len();
        let seg = 2 * n + 2 * SEG_HEAD;
        let den = 2 * n + 2 * DENSITY_HEAD;
        let feat = &trace.features;
        let feat_shape = feat.shape();
        let hw = feat.plane_len();

        // softmax: dz_c = P_c (dP_c - Σ_k dP_k P_k)
        let p = &trace.class_score;
        let mut dz = Tensor::zeros(2, feat.height, feat.width);
        for i in 0..hw {
            let (p0, p1) = (p.data[i], p.data[hw + i]);
            let (g0, g1) = (d_score.data[i], d_score.data[hw + i]);
            let dot = p0 * g0 + p1 * g1;
            dz.data[i] = p0 * (g0 - dot);
            dz.data[hw + i] = p1 * (g1 - dot);
        }
        let mut d_pre = Tensor::zeros(1, feat.height, feat.width);
        for i in 0..hw {
            if trace.density_pre[i] > 0.0 {
                d_pre.data[i] = d_density.data()[i];
            }
        }

        let tensors = self.params.tensors();
        let g = grads.tensors_mut();
        let mut dx = {
            let (gw, gb) = split_pair(g, seg);
            conv_backward(feat_shape, &feat.data, &tensors[seg].data, &dz, 1, gw, gb, true)
                .expect("input gradient requested")
        };
        {
            let (gw, gb) = split_pair(g, den);
            let d2 = conv_backward(feat_shape, &feat.data, &tensors[den].data, &d_pre, 1, gw, gb, true)
                .expect("input gradient requested");
            dx.data.iter_mut().zip(&d2.data).for_each(|(a, b)| *a += b);
        }

        for i in (0..n).rev() {
            let st = &trace.stages[i];
            if let Some(mask) = &st.dropout_mask {
                dx.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            if let Some(arg) = &st.pool_arg {
                dx = maxpool2_backward(&dx, arg, st.relu_out.shape());
            }
            relu_backward_in_place(&mut dx, &st.relu_out);
            let (gw, gb) = split_pair(g, 2 * i);
            match conv_backward(st.input_shape, &st.cols, &tensors[2 * i].data, &dx, 3, gw, gb, i > 0) {
                Some(next) => dx = next,
                None => break,
            }
        }
    }
}

fn split_pair(g: &mut [crate::model::params::Param], at: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = g[at..at + 2].split_at_mut(1);
    (&mut a[0].data, &mut b[0].data)
}

fn softmax2(logits: &Tensor) -> Tensor {
    let hw = logits.plane_len();
    let mut p = Tensor::zeros(2, logits.height, logits.width);
    for i in 0..hw {
        let d = logits.data[hw + i] - logits.data[i];
        // crowd probability = sigmoid(z1 - z0), evaluated stably
        let p1 = if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            let e = d.exp();
            e / (1.0 + e)
        };
        p.data[i] = 1.0 - p1;
        p.data[hw + i] = p1;
    }
    p
}
