//! One optimisation step of the teacher-student pipeline.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor};
use crate::losses::{
    density_consistency_with_floor, inherent_consistency_loss, ramp_lambda,
    seg_consistency_with_floor, supervised_density_loss, supervised_seg_loss, total_loss,
    LossParts, LossReport,
};
use crate::model::{density_target, mask_target, Model, ModelOutput, Params, PerturbationConfig, Trace};
use crate::rng::stream;
use crate::trainer::adam::Adam;
use crate::trainer::config::{MaskKind, Mode, TrainConfig};
use crate::transform::{approx_segmentation, transform_gradient};
use crate::uncertainty::{mc_passes, ThresholdSchedule, UncertaintyBundle};

const STUDENT_STREAM: u64 = 0x5354;
const TEACHER_STREAM: u64 = 0x5445;

/// Generator for the student's dropout masks and input noise at `step`;
/// labeled patches draw first, then unlabeled ones, in batch order.
pub fn student_rng(seed: u64, step: u64) -> ChaCha8Rng {
    stream(seed, &[STUDENT_STREAM, step])
}

/// Generator for the teacher's MC passes at `step`, consumed patch by patch.
pub fn teacher_rng(seed: u64, step: u64) -> ChaCha8Rng {
    stream(seed, &[TEACHER_STREAM, step])
}

/// `θ' ← ζ θ' + (1 - ζ) θ`, elementwise.
pub fn ema_update(teacher: &mut Params, student: &Params, decay: f64) -> Result<()> {
    teacher.ensure_same_layout(student)?;
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

/// Student, optional EMA teacher and optimiser. The teacher is only ever
/// written by [`ema_update`].
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub student: Model,
    pub teacher: Option<Model>,
    pub step: u64,
    pub epoch: usize,
    pub ema_decay: f64,
    pub seed: u64,
    adam: Adam,
}

impl TrainerState {
    /// A fresh state; in semi mode the teacher starts as an exact copy of
    /// the student.
    pub fn new(student: Model, mode: Mode, ema_decay: f64, seed: u64) -> Self {
        let teacher = mode.uses_teacher().then(|| student.clone());
        let adam = Adam::new(&student.params);
        TrainerState {
            student,
            teacher,
            step: 0,
            epoch: 0,
            ema_decay,
            seed,
            adam,
        }
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }
}

/// Per-step settings derived from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub mode: Mode,
    pub lr: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub ramp_steps: u64,
    pub mc_passes: usize,
    pub input_noise_std: f64,
    pub soft_weight: f64,
    pub gain: f64,
    pub seg_mask: MaskKind,
    pub density_mask: MaskKind,
    pub workers: usize,
    /// Overrides the ramped λ when set.
    pub lambda_override: Option<f64>,
}

impl StepSettings {
    pub fn from_config(cfg: &TrainConfig, mode: Mode, lr: f64, ramp_steps: u64) -> Self {
        StepSettings {
            mode,
            lr,
            alpha: cfg.alpha,
            lambda_max: cfg.lambda_max,
            ramp_steps: ramp_steps.max(1),
            mc_passes: cfg.mc_passes,
            input_noise_std: cfg.input_noise_std,
            soft_weight: cfg.soft_weight,
            gain: cfg.gain,
            seg_mask: cfg.seg_mask,
            density_mask: cfg.density_mask,
            workers: cfg.workers,
            lambda_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    #[serde(flatten)]
    pub losses: LossReport,
    /// Fraction of unlabeled prediction cells with `U_h = 1`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kept_fraction: Option<f64>,
}

/// Teacher targets for one unlabeled patch.
struct TeacherView {
    bundle: UncertaintyBundle,
    density: Grid,
}

fn mask_weights(kind: MaskKind, bundle: &UncertaintyBundle) -> Grid {
    match kind {
        MaskKind::None => Grid::filled(bundle.hard.height(), bundle.hard.width(), 1.0),
        MaskKind::Hard => bundle.hard.clone(),
        MaskKind::Soft => bundle.soft.clone(),
    }
}

fn non_finite(step: u64, what: &str) -> Error {
    Error::Numeric {
        step,
        detail: format!("non-finite {what}; step aborted, parameters unchanged"),
    }
}

/// Runs one step: teacher MC passes on the unlabeled patches, student
/// forwards, all loss terms, an optimiser step on the student and finally
/// the EMA teacher update from the new student parameters.
///
/// On a non-finite loss or gradient the state is left untouched.
pub fn train_step(state: &mut TrainerState, batch: &Batch, set: &StepSettings) -> Result<StepReport> {
    let step = state.step;
    let stride = state.student.config.output_stride;
    let semi = set.mode.uses_teacher();
    if semi && state.teacher.is_none() {
        return Err(Error::Config("semi-supervised step without a teacher".into()));
    }
    if !semi && !batch.unlabeled.is_empty() {
        return Err(Error::Config(format!("{} mode takes no unlabeled patches", set.mode)));
    }
    if batch.labeled.is_empty() {
        return Err(Error::Config("batch has no labeled patches".into()));
    }
    if let Some(t) = &state.teacher {
        t.params.ensure_same_layout(&state.student.params)?;
    }

    // (1) teacher targets, detached
    let threshold = ThresholdSchedule::new(set.ramp_steps).threshold(step);
    let mut teacher_views = Vec::with_capacity(batch.unlabeled.len());
    if let Some(teacher) = &state.teacher {
        let perturb = PerturbationConfig::stochastic(set.input_noise_std);
        let mut rng = teacher_rng(state.seed, step);
        for img in &batch.unlabeled {
            let est = mc_passes(teacher, img, set.mc_passes, &perturb, &mut rng, set.workers)?;
            let bundle = UncertaintyBundle::from_mean_score(est.mean_score, threshold, set.soft_weight)?;
            teacher_views.push(TeacherView {
                bundle,
                density: est.mean_density,
            });
        }
    }

    // (2) student forwards
    let perturb = if semi {
        PerturbationConfig::stochastic(set.input_noise_std)
    } else {
        PerturbationConfig::stochastic(0.0)
    };
    let mut rng = student_rng(state.seed, step);
    let mut outputs: Vec<(ModelOutput, Trace)> = Vec::with_capacity(batch.labeled.len() + batch.unlabeled.len());
    for p in &batch.labeled {
        outputs.push(state.student.forward_traced(&p.image, &perturb, &mut rng)?);
    }
    for img in &batch.unlabeled {
        outputs.push(state.student.forward_traced(img, &perturb, &mut rng)?);
    }
    let n_lab = batch.labeled.len();

    // (3) losses and output gradients
    let dens_t: Vec<Grid> = batch
        .labeled
        .iter()
        .map(|p| density_target(p.density.grid(), &state.student.config))
        .collect::<Result<_>>()?;
    let mask_t: Vec<Grid> = batch
        .labeled
        .iter()
        .map(|p| mask_target(p.mask.grid(), stride))
        .collect::<Result<_>>()?;
    let lab_out = &outputs[..n_lab];
    let (sd, g_sd) = supervised_density_loss(
        &lab_out.iter().map(|(o, _)| &o.density).collect::<Vec<_>>(),
        &dens_t.iter().collect::<Vec<_>>(),
    )?;
    let (sb, g_sb) = supervised_seg_loss(
        &lab_out.iter().map(|(o, _)| &o.class_score).collect::<Vec<_>>(),
        &mask_t.iter().collect::<Vec<_>>(),
    )?;

    let mut d_score: Vec<Tensor> = outputs
        .iter()
        .map(|(o, _)| Tensor::zeros(2, o.class_score.height, o.class_score.width))
        .collect();
    let mut d_density: Vec<Grid> = outputs
        .iter()
        .map(|(o, _)| Grid::zeros(o.density.height(), o.density.width()))
        .collect();
    for i in 0..n_lab {
        axpy(d_density[i].data_mut(), 1.0, g_sd[i].data());
        axpy(&mut d_score[i].data, set.alpha, &g_sb[i].data);
    }

    let mut parts = LossParts {
        sd,
        sb,
        ..Default::default()
    };
    let lambda = match set.lambda_override {
        Some(l) => l,
        None => ramp_lambda(step, &crate::losses::LossWeights {
            alpha: set.alpha,
            lambda_max: set.lambda_max,
            ramp_steps: set.ramp_steps,
        })?,
    };
    let mut kept_fraction = None;

    if semi {
        let transform = crate::transform::TransformConfig { gain: set.gain };
        let crowd: Vec<Grid> = outputs.iter().map(|(o, _)| o.crowd_prob_grid()).collect();
        let approx: Vec<Grid> = outputs
            .iter()
            .map(|(o, _)| approx_segmentation(&o.density, &transform))
            .collect::<Result<_>>()?;
        let (lc, g_c) = inherent_consistency_loss(
            &crowd.iter().collect::<Vec<_>>(),
            &approx.iter().collect::<Vec<_>>(),
        )?;
        parts.inherent = Some(lc);
        for (i, (o, _)) in outputs.iter().enumerate() {
            axpy(d_score[i].channel_mut(1), 1.0, g_c.crowd_prob[i].data());
            let dt = transform_gradient(&o.density, &transform)?;
            for ((d, g), t) in d_density[i].data_mut().iter_mut().zip(g_c.approx[i].data()).zip(dt.data()) {
                *d += g * t;
            }
        }

        if !teacher_views.is_empty() {
            let unl_out = &outputs[n_lab..];
            let seg_w: Vec<Grid> = teacher_views.iter().map(|v| mask_weights(set.seg_mask, &v.bundle)).collect();
            let den_w: Vec<Grid> = teacher_views
                .iter()
                .map(|v| mask_weights(set.density_mask, &v.bundle))
                .collect();
            let (cb, g_cb) = seg_consistency_with_floor(
                &unl_out.iter().map(|(o, _)| &o.class_score).collect::<Vec<_>>(),
                &teacher_views.iter().map(|v| &v.bundle.mean_score).collect::<Vec<_>>(),
                &seg_w.iter().collect::<Vec<_>>(),
                set.seg_mask.denominator_floor(),
            )?;
            let (cd, g_cd) = density_consistency_with_floor(
                &unl_out.iter().map(|(o, _)| &o.density).collect::<Vec<_>>(),
                &teacher_views.iter().map(|v| &v.density).collect::<Vec<_>>(),
                &den_w.iter().collect::<Vec<_>>(),
                set.density_mask.denominator_floor(),
            )?;
            parts.cb = Some(cb);
            parts.cd = Some(cd);
            for j in 0..teacher_views.len() {
                axpy(&mut d_score[n_lab + j].data, lambda * set.alpha, &g_cb[j].data);
                axpy(d_density[n_lab + j].data_mut(), lambda, g_cd[j].data());
            }
            let kept: f64 = teacher_views.iter().map(|v| v.bundle.hard.sum()).sum();
            let cells: usize = teacher_views.iter().map(|v| v.bundle.hard.len()).sum();
            kept_fraction = Some(kept / cells as f64);
        }
    }
    let losses = total_loss(&parts, set.alpha, lambda);

    // (4) gradient step on the student
    if !losses.total.is_finite() {
        return Err(Error::Numeric {
            step,
            detail: format!(
                "non-finite loss (L_Sd {}, L_Sb {}, L_c' {:?}, L_Cb {:?}, L_Cd {:?}); step aborted",
                parts.sd, parts.sb, parts.inherent, parts.cb, parts.cd
            ),
        });
    }
    let mut grads = state.student.params.zeros_like();
    for (i, (_, trace)) in outputs.iter().enumerate() {
        state.student.backward(trace, &d_score[i], &d_density[i], &mut grads);
    }
    if !grads.all_finite() {
        return Err(non_finite(step, "gradient"));
    }
    state.adam.update(&mut state.student.params, &grads, set.lr);
    if !state.student.params.all_finite() {
        return Err(non_finite(step, "parameters after the optimiser step"));
    }

    // (5) EMA from the updated student
    if let Some(teacher) = &mut state.teacher {
        ema_update(&mut teacher.params, &state.student.params, state.ema_decay)?;
    }
    state.step += 1;
    Ok(StepReport { losses, kept_fraction })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
