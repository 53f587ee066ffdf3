//! Annotated scenes and the synthetic crowd-scene renderer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// A head-centre annotation in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub fn new(row: usize, col: usize) -> Self {
        Point { row, col }
    }
}

/// An image with intensities in `[0, 1]` plus its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    id: String,
    image: Grid,
    points: Vec<Point>,
}

impl Scene {
    pub fn new(id: impl Into<String>, image: Grid, points: Vec<Point>) -> Result<Self> {
        let (h, w) = image.shape();
        if h == 0 || w == 0 {
            return Err(Error::Input("scene image must be at least 1x1".into()));
        }
        if let Some(p) = points.iter().find(|p| p.row >= h || p.col >= w) {
            return Err(Error::Input(format!(
                "point ({}, {}) outside {h}x{w} image",
                p.row, p.col
            )));
        }
        Ok(Scene {
            id: id.into(),
            image,
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &Grid {
        &self.image
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Smallest scene side the generator accepts.
pub const MIN_SYNTHETIC_SIDE: usize = 32;

/// Renders a deterministic synthetic crowd scene.
///
/// People are bright Gaussian bumps grouped into a few clusters. The
/// background is a flat grey level plus multi-octave value noise and dim
/// distractor bumps, both scaled by `clutter`. Intensities are quantised to
/// 16-bit levels so the scene survives a lossless PNG round trip unchanged.
pub fn generate_synthetic_scene(
    seed: u64,
    height: usize,
    width: usize,
    count_range: (usize, usize),
    clutter: f64,
) -> Result<Scene> {
    if height < MIN_SYNTHETIC_SIDE || width < MIN_SYNTHETIC_SIDE {
        return Err(Error::Config(format!(
            "synthetic scenes need both sides >= {MIN_SYNTHETIC_SIDE}, got {height}x{width}"
        )));
    }
    let (lo, hi) = count_range;
    if lo > hi {
        return Err(Error::Config(format!("empty count range ({lo}, {hi})")));
    }
    if !(0.0..=1.0).contains(&clutter) {
        return Err(Error::Config(format!("clutter level {clutter} outside [0, 1]")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Grid::filled(height, width, BACKGROUND_LEVEL);

    if clutter > 0.0 {
        add_value_noise(&mut image, &mut rng, clutter);
        let area_units = (height * width) as f64 / 1024.0;
        let distractors = (clutter * area_units * 1.5).round() as usize;
        for _ in 0..distractors {
            let r = rng.random_range(0.0..height as f64);
            let c = rng.random_range(0.0..width as f64);
            let amp = clutter * rng.random_range(0.10..0.25);
            let sd = rng.random_range(2.5..4.5);
            add_bump(&mut image, r, c, amp, sd);
        }
    }

    let count = rng.random_range(lo..=hi);
    let points = place_points(&mut rng, height, width, count);
    for p in &points {
        let amp = rng.random_range(0.35..0.6);
        let sd = rng.random_range(1.2..2.0);
        add_bump(&mut image, p.row as f64, p.col as f64, amp, sd);
    }

    for v in image.data_mut() {
        *v = quantize_u16(v.clamp(0.0, 1.0));
    }
    Scene::new(format!("synthetic_{seed}"), image, points)
}

const BACKGROUND_LEVEL: f64 = 0.25;

pub(crate) fn quantize_u16(v: f64) -> f64 {
    (v * 65535.0).round() / 65535.0
}

fn place_points(rng: &mut ChaCha8Rng, height: usize, width: usize, count: usize) -> Vec<Point> {
    if count == 0 {
        return Vec::new();
    }
    let clusters = rng.random_range(1..=3usize).min(count);
    let centres: Vec<(f64, f64, f64)> = (0..clusters)
        .map(|_| {
            (
                rng.random_range(0.15..0.85) * height as f64,
                rng.random_range(0.15..0.85) * width as f64,
                rng.random_range(4.0..12.0),
            )
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let (cr, cc, spread) = centres[rng.random_range(0..clusters)];
            let r = cr + spread * unit.sample(rng);
            let c = cc + spread * unit.sample(rng);
            Point::new(
                r.round().clamp(0.0, (height - 1) as f64) as usize,
                c.round().clamp(0.0, (width - 1) as f64) as usize,
            )
        })
        .collect()
}

fn add_bump(image: &mut Grid, row: f64, col: f64, amplitude: f64, sd: f64) {
    let (h, w) = image.shape();
    let reach = (3.0 * sd).ceil() as isize;
    let (r0, c0) = (row.round() as isize, col.round() as isize);
    for r in (r0 - reach).max(0)..=(r0 + reach).min(h as isize - 1) {
        for c in (c0 - reach).max(0)..=(c0 + reach).min(w as isize - 1) {
            let d2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
            let v = image.get(r as usize, c as usize) + amplitude * (-d2 / (2.0 * sd * sd)).exp();
            image.set(r as usize, c as usize, v);
        }
    }
}

/// Multi-octave value noise: random lattice values blended with a smoothstep.
fn add_value_noise(image: &mut Grid, rng: &mut ChaCha8Rng, clutter: f64) {
    let (h, w) = image.shape();
    for (cell, amp) in [(16usize, 0.5), (8, 0.3), (4, 0.2)] {
        let lh = h / cell + 2;
        let lw = w / cell + 2;
        let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in 0..h {
            let fr = r as f64 / cell as f64;
            let (ir, tr) = (fr.floor() as usize, smoothstep(fr.fract()));
            for c in 0..w {
                let fc = c as f64 / cell as f64;
                let (ic, tc) = (fc.floor() as usize, smoothstep(fc.fract()));
                let v00 = lattice[ir * lw + ic];
                let v01 = lattice[ir * lw + ic + 1];
                let v10 = lattice[(ir + 1) * lw + ic];
                let v11 = lattice[(ir + 1) * lw + ic + 1];
                let top = v00 + (v01 - v00) * tc;
                let bottom = v10 + (v11 - v10) * tc;
                let v = top + (bottom - top) * tr;
                image.set(r, c, image.get(r, c) + clutter * 0.25 * amp * v);
            }
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
