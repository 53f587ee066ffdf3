//! The five loss terms, their gradients with respect to the student's
//! outputs, and the ramp-up schedule that weights the unsupervised part.
//!
//! Every function takes per-image slices and returns the scalar loss plus
//! one gradient array per image, shaped like the student input it
//! differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor};
use crate::uncertainty::gaussian_rampup;

/// Denominator floor for binary (hard) masks: the kept-pixel count.
pub const HARD_MASK_FLOOR: f64 = 1.0;
/// Denominator floor for continuous (soft) weights.
pub const SOFT_MASK_FLOOR: f64 = 1e-8;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Trade-off between density regression and segmentation terms.
    pub alpha: f64,
    pub lambda_max: f64,
    /// Ramp length of the unsupervised weight, in steps.
    pub ramp_steps: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            lambda_max: 1.0,
            ramp_steps: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda_max >= 0.0) {
            return Err(Error::Config(format!("lambda_max must be >= 0, got {}", self.lambda_max)));
        }
        if self.ramp_steps == 0 {
            return Err(Error::Config("ramp length must be at least one step".into()));
        }
        Ok(())
    }
}

/// `λ_t = λ_max * exp(-5 (1 - min(t, ramp) / ramp)^2)`.
pub fn ramp_lambda(step: u64, weights: &LossWeights) -> Result<f64> {
    if weights.ramp_steps == 0 {
        return Err(Error::Config("ramp length must be at least one step".into()));
    }
    Ok(weights.lambda_max * gaussian_rampup(step, weights.ramp_steps))
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} items")));
    }
    Ok(())
}

/// Mean squared error between predicted and target density maps over every
/// pixel of the labeled sub-batch.
pub fn supervised_density_loss(pred: &[&Grid], target: &[&Grid]) -> Result<(f64, Vec<Grid>)> {
    check_len(pred.len(), target.len(), "density loss")?;
    let n: usize = pred.iter().map(|g| g.len()).sum();
    if n == 0 {
        return Ok((0.0, pred.iter().map(|g| Grid::zeros(g.height(), g.width())).collect()));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        p.ensure_same_shape(t, "density loss")?;
        let mut g = Grid::zeros(p.height(), p.width());
        for ((gv, &pv), &tv) in g.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
            let d = pv - tv;
            total += d * d;
            *gv = 2.0 * d * inv;
        }
        grads.push(g);
    }
    Ok((total * inv, grads))
}

/// Mean categorical cross-entropy `-ln P[true class]`.
pub fn supervised_seg_loss(scores: &[&Tensor], masks: &[&Grid]) -> Result<(f64, Vec<Tensor>)> {
    check_len(scores.len(), masks.len(), "segmentation loss")?;
    let n: usize = masks.iter().map(|m| m.len()).sum();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (s, m) in scores.iter().zip(masks) {
        if s.channels != 2 || (s.height, s.width) != m.shape() {
            return Err(Error::Shape(format!(
                "segmentation loss: score {:?} vs mask {:?}",
                s.shape(),
                m.shape()
            )));
        }
        let hw = s.plane_len();
        let mut g = Tensor::zeros(2, s.height, s.width);
        for (i, &y) in m.data().iter().enumerate() {
            let c = if y > 0.5 { 1 } else { 0 };
            let p = s.data[c * hw + i].max(PROB_FLOOR);
            total -= p.ln();
            g.data[c * hw + i] = -inv / p;
        }
        grads.push(g);
    }
    Ok((total * inv, grads))
}

/// Gradients of the inherent consistency loss.
#[derive(Debug, Clone)]
pub struct InherentGrads {
    /// dL/dM_B per image.
    pub crowd_prob: Vec<Grid>,
    /// dL/dM_AB per image.
    pub approx: Vec<Grid>,
}

/// Mean squared error between the segmentation head's crowd channel and the
/// transformed density, over the whole (labeled + unlabeled) batch.
pub fn inherent_consistency_loss(crowd_prob: &[&Grid], approx: &[&Grid]) -> Result<(f64, InherentGrads)> {
    check_len(crowd_prob.len(), approx.len(), "inherent consistency")?;
    let n: usize = crowd_prob.iter().map(|g| g.len()).sum();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut total = 0.0;
    let mut grads = InherentGrads {
        crowd_prob: Vec::with_capacity(crowd_prob.len()),
        approx: Vec::with_capacity(crowd_prob.len()),
    };
    for (b, a) in crowd_prob.iter().zip(approx) {
        b.ensure_same_shape(a, "inherent consistency")?;
        let mut gb = Grid::zeros(b.height(), b.width());
        let mut ga = Grid::zeros(b.height(), b.width());
        for i in 0..b.len() {
            let d = b.data()[i] - a.data()[i];
            total += d * d;
            gb.data_mut()[i] = 2.0 * d * inv;
            ga.data_mut()[i] = -2.0 * d * inv;
        }
        grads.crowd_prob.push(gb);
        grads.approx.push(ga);
    }
    Ok((total * inv, grads))
}

/// `Σ w ‖s - t‖² / max(Σ w, floor)` over all images and pixels, where each
/// pixel's distance sums over `channels` planes. Returns dL/ds per image.
pub fn weighted_consistency(
    student: &[&[f64]],
    teacher: &[&[f64]],
    weights: &[&Grid],
    channels: usize,
    floor: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_len(student.len(), teacher.len(), "consistency")?;
    check_len(student.len(), weights.len(), "consistency weights")?;
    let mut mass = 0.0;
    for ((s, t), w) in student.iter().zip(teacher).zip(weights) {
        if s.len() != t.len() || s.len() != channels * w.len() {
            return Err(Error::Shape(format!(
                "consistency: student {} / teacher {} / weights {}x{channels}",
                s.len(),
                t.len(),
                w.len()
            )));
        }
        mass += w.sum();
    }
    let denom = mass.max(floor);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for ((s, t), w) in student.iter().zip(teacher).zip(weights) {
        let hw = w.len();
        let mut g = vec![0.0; s.len()];
        for c in 0..channels {
            for i in 0..hw {
                let wi = w.data()[i];
                let d = s[c * hw + i] - t[c * hw + i];
                total += wi * d * d;
                g[c * hw + i] = 2.0 * wi * d / denom;
            }
        }
        grads.push(g);
    }
    Ok((total / denom, grads))
}

/// Segmentation consistency: squared Euclidean distance between student and
/// teacher class-score vectors, kept where `U_h = 1`, normalised by the
/// kept-pixel count (floored at one).
pub fn consistency_seg_loss(
    student: &[&Tensor],
    teacher: &[&Tensor],
    hard: &[&Grid],
) -> Result<(f64, Vec<Tensor>)> {
    seg_consistency_with_floor(student, teacher, hard, HARD_MASK_FLOOR)
}

pub(crate) fn seg_consistency_with_floor(
    student: &[&Tensor],
    teacher: &[&Tensor],
    weights: &[&Grid],
    floor: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let s: Vec<&[f64]> = student.iter().map(|t| t.data.as_slice()).collect();
    let t: Vec<&[f64]> = teacher.iter().map(|t| t.data.as_slice()).collect();
    let (v, g) = weighted_consistency(&s, &t, weights, 2, floor)?;
    let grads = g
        .into_iter()
        .zip(student)
        .map(|(data, st)| Tensor {
            channels: 2,
            height: st.height,
            width: st.width,
            data,
        })
        .collect();
    Ok((v, grads))
}

/// Density consistency weighted by `U_s`, normalised by the weight mass.
pub fn consistency_density_loss(
    student: &[&Grid],
    teacher: &[&Grid],
    soft: &[&Grid],
) -> Result<(f64, Vec<Grid>)> {
    density_consistency_with_floor(student, teacher, soft, SOFT_MASK_FLOOR)
}

pub(crate) fn density_consistency_with_floor(
    student: &[&Grid],
    teacher: &[&Grid],
    weights: &[&Grid],
    floor: f64,
) -> Result<(f64, Vec<Grid>)> {
    let s: Vec<&[f64]> = student.iter().map(|g| g.data()).collect();
    let t: Vec<&[f64]> = teacher.iter().map(|g| g.data()).collect();
    let (v, g) = weighted_consistency(&s, &t, weights, 1, floor)?;
    let grads = g
        .into_iter()
        .zip(student)
        .map(|(data, st)| Grid::from_vec(st.height(), st.width(), data))
        .collect::<Result<_>>()?;
    Ok((v, grads))
}

/// Loss values for one batch. Unsupervised terms are `None` when the run
/// does not use them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sd: f64,
    pub sb: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inherent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sd: f64,
    pub l_sb: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cd: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    pub alpha: f64,
}

/// `L = L_Sd + α L_Sb + L_c' + λ (α L_Cb + L_Cd)`, absent terms counting
/// as zero.
pub fn total_loss(parts: &LossParts, alpha: f64, lambda: f64) -> LossReport {
    let unsup = parts.cb.is_some() || parts.cd.is_some();
    let total = parts.sd
        + alpha * parts.sb
        + parts.inherent.unwrap_or(0.0)
        + lambda * (alpha * parts.cb.unwrap_or(0.0) + parts.cd.unwrap_or(0.0));
    LossReport {
        l_sd: parts.sd,
        l_sb: parts.sb,
        l_c: parts.inherent,
        l_cb: parts.cb,
        l_cd: parts.cd,
        total,
        lambda: unsup.then_some(lambda),
        alpha,
    }
}
