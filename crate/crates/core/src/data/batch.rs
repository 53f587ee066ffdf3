//! Mixed labeled/unlabeled batch assembly with joint crop and flip.

use rand::Rng;

use crate::data::density::{density_from_points, mask_from_density, BinaryMask, DensityMap};
use crate::data::scene::Scene;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// A scene with its precomputed density and mask targets.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub scene: Scene,
    pub density: DensityMap,
    pub mask: BinaryMask,
}

impl LabeledScene {
    pub fn new(scene: Scene, sigma: f64) -> Result<Self> {
        let density = density_from_points(&scene, sigma)?;
        let mask = mask_from_density(&density);
        Ok(LabeledScene {
            scene,
            density,
            mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: Grid,
    pub density: DensityMap,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled: Vec<LabeledPatch>,
    pub unlabeled: Vec<Grid>,
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub labeled: usize,
    pub unlabeled: usize,
    pub patch: usize,
    pub flip_p: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            labeled: 8,
            unlabeled: 8,
            patch: 128,
            flip_p: 0.3,
        }
    }
}

fn check_fits(image: &Grid, patch: usize, id: &str) -> Result<()> {
    if image.height() < patch || image.width() < patch {
        return Err(Error::Input(format!(
            "scene {id} is {}x{}, smaller than the {patch}x{patch} crop",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Draws a random `patch × patch` window and applies a horizontal flip with
/// probability `flip_p`; the same offset and flip are applied to every grid.
fn joint_crop<R: Rng + ?Sized>(
    grids: &[&Grid],
    patch: usize,
    flip_p: f64,
    rng: &mut R,
) -> Result<Vec<Grid>> {
    let (h, w) = grids[0].shape();
    let row = rng.random_range(0..=h - patch);
    let col = rng.random_range(0..=w - patch);
    let flip = flip_p > 0.0 && rng.random::<f64>() < flip_p;
    grids
        .iter()
        .map(|g| {
            let c = g.crop(row, col, patch, patch)?;
            Ok(if flip { c.flip_horizontal() } else { c })
        })
        .collect()
}

/// Samples pool members uniformly with replacement and cuts patches from them.
///
/// Density patches keep whatever mass falls inside the window; they are not
/// renormalised.
pub fn make_batch<R: Rng + ?Sized>(
    labeled_pool: &[LabeledScene],
    unlabeled_pool: &[Scene],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Batch> {
    if spec.patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.flip_p) {
        return Err(Error::Config(format!("flip probability {} outside [0, 1]", spec.flip_p)));
    }
    if spec.labeled > 0 && labeled_pool.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    if spec.unlabeled > 0 && unlabeled_pool.is_empty() {
        return Err(Error::Config("unlabeled pool is empty".into()));
    }
    for s in labeled_pool {
        check_fits(s.scene.image(), spec.patch, s.scene.id())?;
    }
    for s in unlabeled_pool {
        check_fits(s.image(), spec.patch, s.id())?;
    }

    let mut labeled = Vec::with_capacity(spec.labeled);
    for _ in 0..spec.labeled {
        let src = &labeled_pool[rng.random_range(0..labeled_pool.len())];
        let mut parts = joint_crop(
            &[src.scene.image(), src.density.grid(), src.mask.grid()],
            spec.patch,
            spec.flip_p,
            rng,
        )?
        .into_iter();
        let image = parts.next().expect("image patch");
        let density = DensityMap::new(parts.next().expect("density patch"))?;
        let mask = BinaryMask::new(parts.next().expect("mask patch"))?;
        labeled.push(LabeledPatch {
            image,
            density,
            mask,
        });
    }

    let mut unlabeled = Vec::with_capacity(spec.unlabeled);
    for _ in 0..spec.unlabeled {
        let src = &unlabeled_pool[rng.random_range(0..unlabeled_pool.len())];
        let mut parts = joint_crop(&[src.image()], spec.patch, spec.flip_p, rng)?;
        unlabeled.push(parts.pop().expect("image patch"));
    }

    Ok(Batch {
        labeled,
        unlabeled,
        patch_size: spec.patch,
    })
}
