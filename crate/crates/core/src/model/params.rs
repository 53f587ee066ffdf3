//! Named parameter arrays.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::NetworkConfig;

/// Initial bias of the density head; keeps the ReLU output alive at start.
pub const DENSITY_BIAS_INIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Ordered parameter list: `conv{i}.weight`, `conv{i}.bias` per stage, then
/// `seg_head.*` and `density_head.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Vec<Param>,
}

pub(crate) const SEG_HEAD: usize = 0;
pub(crate) const DENSITY_HEAD: usize = 1;

impl Params {
    /// All-zero parameters with the layout implied by `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let mut tensors = Vec::new();
        let mut in_c = 1;
        for (i, &out_c) in cfg.channels.iter().enumerate() {
            tensors.push(Param::zeros(format!("conv{i}.weight"), vec![out_c, in_c, 3, 3]));
            tensors.push(Param::zeros(format!("conv{i}.bias"), vec![out_c]));
            in_c = out_c;
        }
        tensors.push(Param::zeros("seg_head.weight", vec![2, in_c, 1, 1]));
        tensors.push(Param::zeros("seg_head.bias", vec![2]));
        tensors.push(Param::zeros("density_head.weight", vec![1, in_c, 1, 1]));
        tensors.push(Param::zeros("density_head.bias", vec![1]));
        Params { tensors }
    }

    /// He-normal conv weights, small head weights, zero biases except the
    /// density head bias.
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let stages = cfg.channels.len();
        for i in 0..stages {
            let w = &mut p.tensors[2 * i];
            let fan_in = (w.shape[1] * 9) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            w.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        let feat = cfg.feature_channels() as f64;
        let seg = Normal::new(0.0, (1.0 / feat).sqrt()).expect("finite std");
        p.head_weight_mut(stages, SEG_HEAD)
            .iter_mut()
            .for_each(|v| *v = seg.sample(rng));
        let den = Normal::new(0.0, 0.01 / feat.sqrt()).expect("finite std");
        p.head_weight_mut(stages, DENSITY_HEAD)
            .iter_mut()
            .for_each(|v| *v = den.sample(rng));
        p.tensors[2 * stages + 3].data[0] = DENSITY_BIAS_INIT;
        p
    }

    fn head_weight_mut(&mut self, stages: usize, head: usize) -> &mut [f64] {
        &mut self.tensors[2 * stages + 2 * head].data
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Param::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub(crate) fn from_tensors(tensors: Vec<Param>) -> Self {
        Params { tensors }
    }

    pub fn tensors(&self) -> &[Param] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Param] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn ensure_same_layout(&self, other: &Params) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets have different layouts".into()))
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_scalars().all(f64::is_finite)
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.iter_scalars()
            .zip(other.iter_scalars())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mutable access to the `i`-th scalar in flattened order.
    pub fn scalar_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn scalar(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("scalar index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_matches_config() {
        let cfg = NetworkConfig::desk_small();
        let p = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<_> = p.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "conv0.weight");
        assert_eq!(p.get("conv1.weight").unwrap().shape, vec![32, 16, 3, 3]);
        assert_eq!(p.get("seg_head.weight").unwrap().shape, vec![2, 64, 1, 1]);
        assert_eq!(p.get("density_head.bias").unwrap().data, vec![DENSITY_BIAS_INIT]);
        assert!(p.same_layout(&p.zeros_like()));
        assert!(!p.same_layout(&Params::zeros(&NetworkConfig::tiny())));
    }

    #[test]
    fn flattened_scalar_access() {
        let mut p = Params::zeros(&NetworkConfig::tiny());
        let n = p.num_scalars();
        *p.scalar_mut(n - 1) = 3.0;
        assert_eq!(p.scalar(n - 1), 3.0);
        assert_eq!(p.get("density_head.bias").unwrap().data[0], 3.0);
    }
}
