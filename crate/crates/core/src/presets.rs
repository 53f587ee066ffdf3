//! Named experiment suites: each resolves to a list of fully specified
//! training runs that differ only in configuration.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::trainer::{MaskKind, Mode, TrainConfig};

/// One run of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: Mode,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub description: &'static str,
    pub variants: Vec<Variant>,
}

pub const PRESET_NAMES: [&str; 4] = ["table1", "table2", "fig4", "desk"];

/// The uncertainty-map ablation rows as `(name, seg mask, density mask)`.
pub const UNCERTAINTY_VARIANTS: [(&str, MaskKind, MaskKind); 6] = [
    ("no_unc", MaskKind::None, MaskKind::None),
    ("hard", MaskKind::Hard, MaskKind::None),
    ("soft", MaskKind::None, MaskKind::Soft),
    ("two_soft", MaskKind::Soft, MaskKind::Soft),
    ("two_hard", MaskKind::Hard, MaskKind::Hard),
    ("both", MaskKind::Hard, MaskKind::Soft),
];

/// Synthetic benchmark used for the desk-scale comparisons: 120 training
/// scenes (half labeled, a tenth held out for validation) and 30 test
/// scenes.
pub fn desk_benchmark_data() -> SyntheticSpec {
    SyntheticSpec {
        n: 120,
        test: 30,
        height: 64,
        width: 64,
        min_count: 2,
        max_count: 30,
        clutter: 0.5,
        labeled_fraction: 0.5,
    }
}

/// Training constants sized for a single CPU core.
pub fn desk_benchmark_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        lr: 1e-3,
        lr_decay_every: 1000,
        patch: 64,
        ema_decay: 0.95,
        ramp_epochs: 10.0,
        patience: 0,
        ..TrainConfig::default()
    }
}

fn variant(name: impl Into<String>, mode: Mode, config: TrainConfig) -> Variant {
    Variant {
        name: name.into(),
        mode,
        config,
    }
}

/// Resolves `name` against `base`; every variant carries a complete config.
pub fn preset(name: &str, base: &TrainConfig) -> Result<ExperimentPreset> {
    let p = match name {
        "table1" => ExperimentPreset {
            name: "table1",
            description: "label-only vs semi-supervised vs fully supervised",
            variants: vec![
                variant("label_only", Mode::LabelOnly, base.clone()),
                variant("semi", Mode::Semi, base.clone()),
                variant("fully", Mode::Fully, base.clone()),
            ],
        },
        "table2" => ExperimentPreset {
            name: "table2",
            description: "which uncertainty map weights which consistency term",
            variants: UNCERTAINTY_VARIANTS
                .iter()
                .map(|&(n, seg, den)| {
                    let cfg = TrainConfig {
                        seg_mask: seg,
                        density_mask: den,
                        ..base.clone()
                    };
                    variant(n, Mode::Semi, cfg)
                })
                .collect(),
        },
        "fig4" => {
            let mut variants = Vec::new();
            for labeled in [6, 13, 27, 54] {
                let cfg = TrainConfig {
                    max_labeled: Some(labeled),
                    ..base.clone()
                };
                variants.push(variant(format!("label_only_l{labeled}"), Mode::LabelOnly, cfg.clone()));
                variants.push(variant(format!("semi_l{labeled}"), Mode::Semi, cfg));
            }
            for unlabeled in [6, 13, 27, 54] {
                let cfg = TrainConfig {
                    max_unlabeled: Some(unlabeled),
                    ..base.clone()
                };
                variants.push(variant(format!("semi_u{unlabeled}"), Mode::Semi, cfg));
            }
            ExperimentPreset {
                name: "fig4",
                description: "error against the number of labeled and unlabeled images",
                variants,
            }
        }
        "desk" => ExperimentPreset {
            name: "desk",
            description: "semi vs label-only vs no-uncertainty on the desk benchmark",
            variants: vec![
                variant("label_only", Mode::LabelOnly, base.clone()),
                variant("semi", Mode::Semi, base.clone()),
                variant(
                    "no_unc",
                    Mode::Semi,
                    TrainConfig {
                        seg_mask: MaskKind::None,
                        density_mask: MaskKind::None,
                        ..base.clone()
                    },
                ),
            ],
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    for v in &p.variants {
        v.config.validate()?;
    }
    Ok(p)
}
