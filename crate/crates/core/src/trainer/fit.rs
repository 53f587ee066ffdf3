//! The epoch loop: batching, validation, early stopping and run artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, LabeledScene, Scene};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{checkpoint, Model};
use crate::rng::stream;
use crate::trainer::config::{Mode, TrainConfig};
use crate::trainer::step::{train_step, StepReport, StepSettings, TrainerState};

const INIT_STREAM: u64 = 0x494e;
const BATCH_STREAM: u64 = 0x4241;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STUDENT_CHECKPOINT: &str = "best.ckpt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const FROZEN_CONFIG: &str = "config.toml";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        #[serde(flatten)]
        report: StepReport,
    },
    Epoch {
        epoch: usize,
        step: u64,
        lr: f64,
        train_loss: f64,
        val_mae: f64,
        val_rmse: f64,
        best: bool,
    },
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Student at the epoch with the lowest validation MAE.
    pub student: Model,
    /// Teacher snapshot from the same epoch (semi mode only).
    pub teacher: Option<Model>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub steps: u64,
    pub records: Vec<MetricRecord>,
}

impl FitOutcome {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Training pools for `mode`, truncated to the configured caps.
fn pools(cfg: &TrainConfig, dataset: &Dataset, mode: Mode) -> Result<(Vec<LabeledScene>, Vec<Scene>)> {
    let cap = |v: &[Scene], n: Option<usize>| v[..n.unwrap_or(v.len()).min(v.len())].to_vec();
    let labeled = cap(&dataset.labeled, cfg.max_labeled);
    let unlabeled = cap(&dataset.unlabeled, cfg.max_unlabeled);
    let (lab, unl) = match mode {
        Mode::Semi => (labeled, unlabeled),
        Mode::LabelOnly => (labeled, Vec::new()),
        Mode::Fully => {
            if !dataset.unlabeled_annotated && !unlabeled.is_empty() {
                return Err(Error::Config(
                    "fully supervised mode needs annotations for the unlabeled pool".into(),
                ));
            }
            (labeled.into_iter().chain(unlabeled).collect(), Vec::new())
        }
    };
    if lab.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    if mode == Mode::Semi && unl.is_empty() {
        return Err(Error::Config("semi-supervised mode needs unlabeled scenes".into()));
    }
    let lab = lab
        .into_iter()
        .map(|s| LabeledScene::new(s, cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok((lab, unl))
}

/// Steps per epoch: one pass over the labeled pool in batches.
pub fn steps_per_epoch(n_labeled: usize, batch_labeled: usize) -> u64 {
    n_labeled.div_ceil(batch_labeled).max(1) as u64
}

/// Trains without writing files.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset, mode: Mode) -> Result<FitOutcome> {
    fit_with(cfg, dataset, mode, None, &mut |_| {})
}

/// Trains and, when `out_dir` is given, writes the frozen config, the
/// metrics log (flushed per record) and the best student / teacher
/// checkpoints there. `on_record` sees every record as it is produced.
pub fn fit_with(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mode: Mode,
    out_dir: Option<&Path>,
    on_record: &mut dyn FnMut(&MetricRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let (labeled, unlabeled) = pools(cfg, dataset, mode)?;
    if dataset.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(FROZEN_CONFIG);
            fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            let path = dir.join(METRICS_FILE);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((std::io::BufWriter::new(f), path))
        }
        None => None,
    };

    let student = Model::new(cfg.network.clone(), &mut stream(cfg.seed, &[INIT_STREAM]))?;
    let mut state = TrainerState::new(student, mode, cfg.ema_decay, cfg.seed);
    let per_epoch = steps_per_epoch(labeled.len(), cfg.batch_labeled);
    let ramp_steps = (cfg.ramp_epochs * per_epoch as f64).ceil().max(1.0) as u64;
    let spec = cfg.batch_spec(mode);

    let mut records = Vec::new();
    let mut emit = |rec: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<()> {
        on_record(&rec);
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        records.push(rec);
        Ok(())
    };

    let mut best: Option<(f64, usize, Model, Option<Model>)> = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = cfg.lr_at(epoch);
        let settings = StepSettings::from_config(cfg, mode, lr, ramp_steps);
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let mut rng = stream(cfg.seed, &[BATCH_STREAM, state.step]);
            let batch = make_batch(&labeled, &unlabeled, &spec, &mut rng)?;
            let step = state.step;
            let report = train_step(&mut state, &batch, &settings)?;
            loss_sum += report.losses.total;
            emit(MetricRecord::Step { step, epoch, lr, report }, &mut records)?;
        }
        let val = evaluate(&state.student, &dataset.val, cfg.tile)?;
        let improved = best.as_ref().is_none_or(|b| val.mae < b.0);
        if improved {
            best = Some((val.mae, epoch, state.student.clone(), state.teacher.clone()));
        }
        emit(
            MetricRecord::Epoch {
                epoch,
                step: state.step,
                lr,
                train_loss: loss_sum / per_epoch as f64,
                val_mae: val.mae,
                val_rmse: val.rmse,
                best: improved,
            },
            &mut records,
        )?;
        epochs_run = epoch + 1;
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (best_val_mae, best_epoch, student, teacher) = best.expect("at least one epoch ran");
    if let Some(dir) = out_dir {
        let meta = serde_json::json!({
            "mode": mode.to_string(),
            "epoch": best_epoch,
            "val_mae": best_val_mae,
            "seed": cfg.seed,
        });
        checkpoint::save(&dir.join(STUDENT_CHECKPOINT), &student, meta.clone())?;
        if let Some(t) = &teacher {
            checkpoint::save(&dir.join(TEACHER_CHECKPOINT), t, meta)?;
        }
    }
    Ok(FitOutcome {
        student,
        teacher,
        best_epoch,
        best_val_mae,
        epochs_run,
        steps: state.step,
        records,
    })
}
