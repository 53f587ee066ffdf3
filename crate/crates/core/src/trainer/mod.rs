//! Teacher-student training.

pub mod adam;
pub mod config;
pub mod fit;
pub mod step;

pub use adam::Adam;
pub use config::{MaskKind, Mode, TrainConfig};
pub use fit::{fit, fit_with, steps_per_epoch, FitOutcome, MetricRecord};
pub use step::{ema_update, student_rng, teacher_rng, train_step, StepReport, StepSettings, TrainerState};
