//! Dataset splits, the plain-text index file and synthetic benchmark
//! generation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_scene, write_scene};
use crate::data::scene::{generate_synthetic_scene, Scene};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_dir_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.dir_name() == s)
    }

    /// Whether scenes of this split must come with annotation files.
    fn requires_points(self) -> bool {
        !matches!(self, Split::Unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    /// Whether the unlabeled scenes carry real annotations (synthetic data
    /// does); only the fully supervised mode looks at them.
    pub unlabeled_annotated: bool,
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            unlabeled_annotated: true,
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Scene> {
        match split {
            Split::Labeled => &mut self.labeled,
            Split::Unlabeled => &mut self.unlabeled,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Writes `<dir>/<split>/<id>.png` and `.txt` for every scene, plus the
    /// index file listing `<split>/<id>` one entry per line. Unlabeled
    /// annotations are only written when `unlabeled_annotated` is set.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut index = String::from("# crowdcount dataset index v1\n");
        for split in Split::ALL {
            let sub = dir.join(split.dir_name());
            for scene in self.split(split) {
                let with_points = split.requires_points() || self.unlabeled_annotated;
                write_scene(&sub, scene, with_points)?;
                index.push_str(&format!("{}/{}\n", split.dir_name(), scene.id()));
            }
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut ds = Dataset::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, id) = line
                .split_once('/')
                .and_then(|(s, id)| Split::from_dir_name(s).map(|sp| (sp, id)))
                .ok_or_else(|| {
                    Error::format(&path, format!("line {}: expected `<split>/<id>`", n + 1))
                })?;
            let sub = dir.join(split.dir_name());
            if split == Split::Unlabeled && !sub.join(format!("{id}.txt")).exists() {
                ds.unlabeled_annotated = false;
            }
            let scene = read_scene(&sub, id, split.requires_points())?;
            ds.split_mut(split).push(scene);
        }
        Ok(ds)
    }
}

/// Split sizes for `n` training images: validation takes `max(1, n / 10)`
/// images, the remainder is divided into labeled (`floor(rest * fraction)`)
/// and unlabeled.
pub fn split_counts(n: usize, labeled_fraction: f64) -> Result<(usize, usize, usize)> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 training scenes, got {n}")));
    }
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let val = (n / 10).max(1);
    let rest = n - val;
    let labeled = (rest as f64 * labeled_fraction).floor() as usize;
    Ok((labeled, rest - labeled, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Training scenes (labeled + unlabeled + val).
    pub n: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub clutter: f64,
    pub labeled_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
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
}

/// Generates a synthetic dataset; scene `i` uses a seed derived from
/// `(seed, i)` so the whole dataset is a pure function of its inputs.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let (n_lab, n_unl, n_val) = split_counts(spec.n, spec.labeled_fraction)?;
    let make = |i: usize| {
        generate_synthetic_scene(
            derive_seed(seed, &[i as u64]),
            spec.height,
            spec.width,
            (spec.min_count, spec.max_count),
            spec.clutter,
        )
        .map(|s| {
            let img = s.image().clone();
            let pts = s.points().to_vec();
            Scene::new(format!("scene_{i:05}"), img, pts).expect("generated scene is valid")
        })
    };
    let mut ds = Dataset::default();
    for i in 0..spec.n + spec.test {
        let scene = make(i)?;
        let bucket = if i < n_lab {
            &mut ds.labeled
        } else if i < n_lab + n_unl {
            &mut ds.unlabeled
        } else if i < n_lab + n_unl + n_val {
            &mut ds.val
        } else {
            &mut ds.test
        };
        bucket.push(scene);
    }
    Ok(ds)
}
