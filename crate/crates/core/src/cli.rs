//! Command-line front end: `generate`, `train`, `eval`, `export`, `ablate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{generate_dataset, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_maps, EvalResult, ExportOptions};
use crate::model::checkpoint;
use crate::presets::{desk_benchmark_config, preset};
use crate::trainer::{fit_with, MetricRecord, Mode, TrainConfig};
use crate::transform::TransformConfig;
use crate::uncertainty::MAX_ENTROPY;

/// Output root used when `--out` is relative.
pub const OUT_ENV: &str = "CROWDCOUNT_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crowdcount", version, about = "Semi-supervised crowd counting with an uncertainty-aware mean teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with configuration values; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve under $CROWDCOUNT_OUT).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with labeled/unlabeled/val/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Training scenes (labeled + unlabeled + val).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Labeled fraction of the non-validation training scenes.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        clutter: Option<f64>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "semi")]
        mode: Mode,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Count people with a checkpoint and report MAE / RMSE.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write density, segmentation and uncertainty maps for some scenes.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Teacher checkpoint for the uncertainty maps (defaults to the student).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of scenes to export.
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Run every variant of a preset and tabulate test MAE / RMSE.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds; each variant runs once per seed.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Input(_) | Error::Shape(_) | Error::Io { .. } | Error::Format { .. } => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => desk_benchmark_config(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct GenerateRecord<'a> {
    seed: u64,
    #[serde(flatten)]
    spec: &'a SyntheticSpec,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    mode: Option<Mode>,
    data: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    config: &'a TrainConfig,
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            common,
            n,
            test,
            split,
            height,
            width,
            clutter,
        } => {
            let mut spec: SyntheticSpec = match &common.config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => crate::presets::desk_benchmark_data(),
            };
            if let Some(v) = n {
                spec.n = v;
            }
            if let Some(v) = test {
                spec.test = v;
            }
            if let Some(v) = split {
                spec.labeled_fraction = v;
            }
            if let Some(v) = height {
                spec.height = v;
            }
            if let Some(v) = width {
                spec.width = v;
            }
            if let Some(v) = clutter {
                spec.clutter = v;
            }
            if spec.n == 0 {
                return Err(Error::Config("--n must be at least 2".into()));
            }
            let seed = common.seed.unwrap_or(0);
            let ds = generate_dataset(&spec, seed)?;
            let out = resolve_out(&common.out);
            ds.save(&out)?;
            let frozen = toml::to_string_pretty(&GenerateRecord { seed, spec: &spec }).expect("spec serializes");
            write_text(&out.join("generate.toml"), &frozen)?;
            println!(
                "wrote {} labeled / {} unlabeled / {} val / {} test scenes to {}",
                ds.labeled.len(),
                ds.unlabeled.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            mode,
            epochs,
            workers,
        } => {
            let mut cfg = load_train_config(&common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let ds = Dataset::load(&data)?;
            let out = resolve_out(&common.out);
            let outcome = fit_with(&cfg, &ds, mode, Some(&out), &mut print_epoch)?;
            let run = RunRecord {
                command: "train",
                mode: Some(mode),
                data: Some(&data),
                checkpoint: None,
                config: &cfg,
            };
            write_text(&out.join("run.toml"), &toml::to_string_pretty(&run).expect("run serializes"))?;
            println!(
                "best epoch {} with validation MAE {:.4}; checkpoint in {}",
                outcome.best_epoch,
                outcome.best_val_mae,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            data,
            split,
        } => {
            let cfg = load_train_config(&common)?;
            let split: Split = split.parse()?;
            let (model, _) = checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let result = evaluate(&model, ds.split(split), cfg.tile)?;
            let out = resolve_out(&common.out);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_eval(&out, &result)?;
            let run = RunRecord {
                command: "eval",
                mode: None,
                data: Some(&data),
                checkpoint: Some(&ckpt),
                config: &cfg,
            };
            write_text(&out.join("run.toml"), &toml::to_string_pretty(&run).expect("run serializes"))?;
            print!("{}", result.to_table());
            Ok(())
        }
        Command::Export {
            common,
            checkpoint: ckpt,
            teacher,
            data,
            split,
            limit,
        } => {
            let cfg = load_train_config(&common)?;
            let split: Split = split.parse()?;
            let (student, _) = checkpoint::load(&ckpt)?;
            let teacher = teacher.as_deref().map(checkpoint::load).transpose()?.map(|(m, _)| m);
            let ds = Dataset::load(&data)?;
            let out = resolve_out(&common.out);
            let opts = ExportOptions {
                passes: cfg.mc_passes,
                input_noise_std: cfg.input_noise_std,
                threshold: MAX_ENTROPY,
                soft_weight: cfg.soft_weight,
                transform: TransformConfig { gain: cfg.gain },
                sigma: cfg.sigma,
                seed: cfg.seed,
                tile: cfg.tile,
            };
            let mut n = 0;
            for scene in ds.split(split).iter().take(limit) {
                n += export_maps(&student, teacher.as_ref(), scene, &out, &opts)?.len();
            }
            let run = RunRecord {
                command: "export",
                mode: None,
                data: Some(&data),
                checkpoint: Some(&ckpt),
                config: &cfg,
            };
            write_text(&out.join("run.toml"), &toml::to_string_pretty(&run).expect("run serializes"))?;
            println!("wrote {n} files to {}", out.display());
            Ok(())
        }
        Command::Ablate {
            common,
            preset: name,
            data,
            seeds,
            epochs,
        } => {
            let mut base = load_train_config(&common)?;
            if let Some(e) = epochs {
                base.epochs = e;
            }
            let suite = preset(&name, &base)?;
            let ds = Dataset::load(&data)?;
            let out = resolve_out(&common.out);
            let mut rows = Vec::new();
            for v in &suite.variants {
                let mut runs = Vec::new();
                for &seed in &seeds {
                    let cfg = TrainConfig {
                        seed,
                        ..v.config.clone()
                    };
                    eprintln!("[{}] {} seed {seed}", suite.name, v.name);
                    let dir = out.join(&v.name).join(format!("seed{seed}"));
                    let outcome = fit_with(&cfg, &ds, v.mode, Some(&dir), &mut print_epoch)?;
                    let test = evaluate(&outcome.student, &ds.test, cfg.tile)?;
                    write_eval(&dir, &test)?;
                    runs.push(SeedResult {
                        seed,
                        val_mae: outcome.best_val_mae,
                        test_mae: test.mae,
                        test_rmse: test.rmse,
                    });
                }
                rows.push(AblationRow::new(&v.name, v.mode, runs));
            }
            let table = ablation_table(&rows);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_text(&out.join("ablate.txt"), &table)?;
            write_text(
                &out.join("ablate.json"),
                &serde_json::to_string_pretty(&rows).expect("rows serialize"),
            )?;
            let run = RunRecord {
                command: "ablate",
                mode: None,
                data: Some(&data),
                checkpoint: None,
                config: &base,
            };
            write_text(&out.join("run.toml"), &toml::to_string_pretty(&run).expect("run serializes"))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn print_epoch(rec: &MetricRecord) {
    if let MetricRecord::Epoch {
        epoch,
        train_loss,
        val_mae,
        val_rmse,
        ..
    } = rec
    {
        eprintln!("epoch {epoch:>4}  loss {train_loss:.5}  val MAE {val_mae:.3}  RMSE {val_rmse:.3}");
    }
}

fn write_eval(dir: &Path, result: &EvalResult) -> Result<()> {
    write_text(&dir.join("eval.txt"), &result.to_table())?;
    write_text(
        &dir.join("eval.json"),
        &serde_json::to_string_pretty(result).expect("result serializes"),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub val_mae: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: Mode,
    pub median_test_mae: f64,
    pub median_test_rmse: f64,
    pub runs: Vec<SeedResult>,
}

impl AblationRow {
    pub fn new(variant: &str, mode: Mode, runs: Vec<SeedResult>) -> Self {
        AblationRow {
            variant: variant.to_string(),
            mode,
            median_test_mae: median(runs.iter().map(|r| r.test_mae)),
            median_test_rmse: median(runs.iter().map(|r| r.test_rmse)),
            runs,
        }
    }
}

/// Median of a non-empty sample (mean of the two middle values for even
/// sizes); NaN when empty.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<20} {:<11} {:>10} {:>10}  per-seed MAE\n", "variant", "mode", "MAE", "RMSE");
    for r in rows {
        let per: Vec<String> = r.runs.iter().map(|s| format!("{:.3}", s.test_mae)).collect();
        out.push_str(&format!(
            "{:<20} {:<11} {:>10.3} {:>10.3}  {}\n",
            r.variant,
            r.mode.to_string(),
            r.median_test_mae,
            r.median_test_rmse,
            per.join(" ")
        ));
    }
    out
}
