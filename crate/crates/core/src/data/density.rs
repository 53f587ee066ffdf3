//! Ground-truth density maps and binary crowd masks.

use crate::data::scene::{Point, Scene};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Kernels are truncated to a disk of radius `TRUNCATION * sigma`.
pub const TRUNCATION: f64 = 4.0;

pub const DEFAULT_SIGMA: f64 = 4.0;

/// Non-negative people-per-pixel map.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(Grid);

impl DensityMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if let Some(v) = grid.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Input(format!("density value {v} is negative")));
        }
        Ok(DensityMap(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn count(&self) -> f64 {
        self.0.sum()
    }
}

/// Crowd/background mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Grid);

impl BinaryMask {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn ones(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Places one truncated isotropic Gaussian of std `sigma` per point.
///
/// Each kernel is restricted to the disk of radius `4 * sigma` intersected
/// with the image and renormalised to unit mass, so the map sums to the
/// number of points.
pub fn density_from_points(scene: &Scene, sigma: f64) -> Result<DensityMap> {
    density_from_point_list(scene.height(), scene.width(), scene.points(), sigma)
}

pub fn density_from_point_list(
    height: usize,
    width: usize,
    points: &[Point],
    sigma: f64,
) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("kernel sigma must be positive, got {sigma}")));
    }
    if let Some(p) = points.iter().find(|p| p.row >= height || p.col >= width) {
        return Err(Error::Input(format!(
            "point ({}, {}) outside {height}x{width} image",
            p.row, p.col
        )));
    }
    let radius = TRUNCATION * sigma;
    let reach = radius.floor() as isize;
    let r2 = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);

    let mut grid = Grid::zeros(height, width);
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for p in points {
        kernel.clear();
        let (pr, pc) = (p.row as isize, p.col as isize);
        let mut mass = 0.0;
        for dr in -reach..=reach {
            let r = pr + dr;
            if r < 0 || r >= height as isize {
                continue;
            }
            for dc in -reach..=reach {
                let c = pc + dc;
                if c < 0 || c >= width as isize {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as f64;
                if d2 > r2 {
                    continue;
                }
                let v = (-d2 * inv).exp();
                mass += v;
                kernel.push((r as usize * width + c as usize, v));
            }
        }
        let data = grid.data_mut();
        for &(idx, v) in &kernel {
            data[idx] += v / mass;
        }
    }
    DensityMap::new(grid)
}

/// Elementwise indicator `density > 0`.
pub fn mask_from_density(density: &DensityMap) -> BinaryMask {
    BinaryMask(density.grid().map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}
