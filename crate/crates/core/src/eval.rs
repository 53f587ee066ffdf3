//! Counting metrics, full-image inference and map export.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::density::density_from_points;
use crate::data::io::write_raw_grid;
use crate::data::scene::Scene;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{Model, ModelOutput, PerturbationConfig};
use crate::transform::{approx_segmentation, TransformConfig};
use crate::uncertainty::{mc_passes, UncertaintyBundle, MAX_ENTROPY};

/// Largest side processed in one forward pass; bigger images are tiled.
pub const DEFAULT_TILE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub predicted: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_image: Vec<ImageEval>,
    pub mae: f64,
    pub rmse: f64,
}

impl EvalResult {
    pub fn from_counts<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = (S, f64, f64)>,
        S: Into<String>,
    {
        let per_image: Vec<ImageEval> = items
            .into_iter()
            .map(|(id, predicted, truth)| ImageEval {
                id: id.into(),
                predicted,
                truth,
                abs_error: (predicted - truth).abs(),
            })
            .collect();
        let n = per_image.len().max(1) as f64;
        let mae = per_image.iter().map(|e| e.abs_error).sum::<f64>() / n;
        let mse = per_image.iter().map(|e| e.abs_error * e.abs_error).sum::<f64>() / n;
        EvalResult {
            per_image,
            mae,
            rmse: mse.sqrt(),
        }
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>10} {:>10}\n", "image", "pred", "true", "abs_err");
        for e in &self.per_image {
            out.push_str(&format!(
                "{:<24} {:>10.3} {:>10.0} {:>10.3}\n",
                e.id, e.predicted, e.truth, e.abs_error
            ));
        }
        out.push_str(&format!("MAE {:.4}  RMSE {:.4}\n", self.mae, self.rmse));
        out
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads `image` on the bottom/right to multiples of `stride`.
pub fn reflect_pad(image: &Grid, stride: usize) -> Grid {
    let (h, w) = image.shape();
    let hp = h.div_ceil(stride) * stride;
    let wp = w.div_ceil(stride) * stride;
    if (hp, wp) == (h, w) {
        return image.clone();
    }
    Grid::from_fn(hp, wp, |r, c| image.get(reflect(r, h), reflect(c, w)))
}

/// Deterministic full-image prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Stitched output over the padded image.
    pub output: ModelOutput,
    /// Count over the original (unpadded) image area.
    pub count: f64,
}

/// Runs the model with dropout off and no noise. Images whose sides are not
/// multiples of the stride are reflect-padded and output cells are weighted
/// by the fraction of their pixels inside the original image. Images larger
/// than `tile` are processed in non-overlapping tiles.
pub fn predict(model: &Model, image: &Grid, tile: usize) -> Result<Prediction> {
    let s = model.config.output_stride;
    let (h, w) = image.shape();
    let padded = reflect_pad(image, s);
    let (hp, wp) = padded.shape();
    let tile = (tile.max(s) / s) * s;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let output = if hp <= tile && wp <= tile {
        model.forward(&padded, &PerturbationConfig::EVAL, &mut rng)?
    } else {
        let (oh, ow) = (hp / s, wp / s);
        let mut score = crate::grid::Tensor::zeros(2, oh, ow);
        let mut density = Grid::zeros(oh, ow);
        for r0 in (0..hp).step_by(tile) {
            for c0 in (0..wp).step_by(tile) {
                let th = tile.min(hp - r0);
                let tw = tile.min(wp - c0);
                let part = padded.crop(r0, c0, th, tw)?;
                let out = model.forward(&part, &PerturbationConfig::EVAL, &mut rng)?;
                let (ph, pw) = out.shape();
                for r in 0..ph {
                    for c in 0..pw {
                        let (gr, gc) = (r0 / s + r, c0 / s + c);
                        density.set(gr, gc, out.density.get(r, c));
                        for ch in 0..2 {
                            score.data[(ch * oh + gr) * ow + gc] =
                                out.class_score.data[(ch * ph + r) * pw + c];
                        }
                    }
                }
            }
        }
        ModelOutput {
            class_score: score,
            density,
        }
    };

    let area = (s * s) as f64;
    let mut count = 0.0;
    for r in 0..output.density.height() {
        let rows_in = (h.min((r + 1) * s)).saturating_sub(r * s);
        for c in 0..output.density.width() {
            let cols_in = (w.min((c + 1) * s)).saturating_sub(c * s);
            let frac = (rows_in * cols_in) as f64 / area;
            count += output.density.get(r, c) * area * frac;
        }
    }
    Ok(Prediction {
        output,
        count: count / model.config.density_unit,
    })
}

pub fn evaluate(model: &Model, scenes: &[Scene], tile: usize) -> Result<EvalResult> {
    let mut items = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let pred = predict(model, scene.image(), tile)?;
        items.push((scene.id().to_string(), pred.count, scene.count() as f64));
    }
    Ok(EvalResult::from_counts(items))
}

/// Colour stops of a perceptually ordered dark-to-yellow map.
const COLORMAP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let x = v * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let t = x - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (COLORMAP[i][k] + (COLORMAP[i + 1][k] - COLORMAP[i][k]) * t).round() as u8;
    }
    out
}

/// Certain pixels (`U_h = 1`) render black, uncertain ones yellow.
pub const HARD_CERTAIN: [u8; 3] = [0, 0, 0];
pub const HARD_UNCERTAIN: [u8; 3] = [253, 231, 37];

fn save_rgb(path: &Path, grid: &Grid, color: impl Fn(f64) -> [u8; 3]) -> Result<()> {
    let (h, w) = grid.shape();
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, Rgb(color(grid.get(r, c))));
        }
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Renders `grid / scale` with the colormap; `scale <= 0` renders the floor.
pub fn render_scaled(path: &Path, grid: &Grid, scale: f64) -> Result<()> {
    save_rgb(path, grid, |v| colormap(if scale > 0.0 { v / scale } else { 0.0 }))
}

pub fn render_hard_mask(path: &Path, mask: &Grid) -> Result<()> {
    save_rgb(path, mask, |v| if v > 0.5 { HARD_CERTAIN } else { HARD_UNCERTAIN })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportOptions {
    pub passes: usize,
    pub input_noise_std: f64,
    pub threshold: f64,
    pub soft_weight: f64,
    pub transform: TransformConfig,
    pub sigma: f64,
    pub seed: u64,
    pub tile: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            passes: 8,
            input_noise_std: 0.05,
            threshold: MAX_ENTROPY,
            soft_weight: 7.0,
            transform: TransformConfig::default(),
            sigma: crate::data::DEFAULT_SIGMA,
            seed: 0,
            tile: DEFAULT_TILE,
        }
    }
}

/// Writes colour-mapped PNGs and raw float32 grids for the input, GT
/// density, predicted density, `M_B`, `M_AB`, entropy `I`, `U_h` and `U_s`.
///
/// Uncertainty maps come from MC passes of `teacher` (the student when no
/// teacher is given).
pub fn export_maps(
    student: &Model,
    teacher: Option<&Model>,
    scene: &Scene,
    out_dir: &Path,
    opts: &ExportOptions,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pred = predict(student, scene.image(), opts.tile)?;
    let approx = approx_segmentation(&pred.output.density, &opts.transform)?;
    let crowd = pred.output.crowd_prob_grid();
    let gt = density_from_points(scene, opts.sigma)?.into_grid();

    let unc_model = teacher.unwrap_or(student);
    let padded = reflect_pad(scene.image(), unc_model.config.output_stride);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let est = mc_passes(
        unc_model,
        &padded,
        opts.passes,
        &PerturbationConfig::stochastic(opts.input_noise_std),
        &mut rng,
        1,
    )?;
    let bundle = UncertaintyBundle::from_mean_score(est.mean_score, opts.threshold, opts.soft_weight)?;

    let id = scene.id();
    let mut written = Vec::new();
    let mut emit = |name: &str, grid: &Grid, render: &dyn Fn(&Path, &Grid) -> Result<()>| -> Result<()> {
        let png = out_dir.join(format!("{id}_{name}.png"));
        let raw = out_dir.join(format!("{id}_{name}.f32"));
        render(&png, grid)?;
        write_raw_grid(&raw, grid)?;
        written.push(png);
        written.push(raw);
        Ok(())
    };
    emit("input", scene.image(), &|p, g| render_scaled(p, g, 1.0))?;
    emit("gt_density", &gt, &|p, g| render_scaled(p, g, g.max()))?;
    emit("density", &pred.output.density, &|p, g| render_scaled(p, g, g.max()))?;
    emit("segmentation", &crowd, &|p, g| render_scaled(p, g, 1.0))?;
    emit("approx_segmentation", &approx, &|p, g| render_scaled(p, g, 1.0))?;
    emit("entropy", &bundle.entropy, &|p, g| render_scaled(p, g, MAX_ENTROPY))?;
    emit("hard_uncertainty", &bundle.hard, &|p, g| render_hard_mask(p, g))?;
    let w = opts.soft_weight;
    emit("soft_uncertainty", &bundle.soft, &|p, g| render_scaled(p, g, w))?;
    Ok(written)
}
