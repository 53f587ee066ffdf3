//! Row-major 2-D grids of `f64` used for images, density maps, masks and
//! per-pixel uncertainty maps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Copies the `size_h × size_w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Grid> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::Input(format!(
                "crop {size_h}x{size_w} at ({row},{col}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w);
        for r in row..row + size_h {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + size_w]);
        }
        Ok(Grid {
            height: size_h,
            width: size_w,
            data,
        })
    }

    /// Column-reversed copy.
    pub fn flip_horizontal(&self) -> Grid {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            let row = &self.data[r * self.width..(r + 1) * self.width];
            data.extend(row.iter().rev());
        }
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    fn pool(&self, stride: usize, init: f64, fold: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Shape(format!(
                "{}x{} grid is not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / stride, self.width / stride);
        let mut out = Grid::filled(oh, ow, init);
        for r in 0..self.height {
            for c in 0..self.width {
                let idx = (r / stride) * ow + c / stride;
                out.data[idx] = fold(out.data[idx], self.data[r * self.width + c]);
            }
        }
        Ok(out)
    }

    /// Sums each `stride × stride` block; total mass is preserved.
    pub fn sum_pool(&self, stride: usize) -> Result<Grid> {
        self.pool(stride, 0.0, |a, b| a + b)
    }

    pub fn max_pool(&self, stride: usize) -> Result<Grid> {
        self.pool(stride, f64::NEG_INFINITY, f64::max)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Grid {
        Grid::from_fn(self.height * factor, self.width * factor, |r, c| {
            self.get(r / factor, c / factor)
        })
    }
}

/// Channel-major 3-D tensor (`channels × height × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_grid(grid: &Grid) -> Self {
        Tensor {
            channels: 1,
            height: grid.height(),
            width: grid.width(),
            data: grid.data().to_vec(),
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_grid(&self, c: usize) -> Grid {
        Grid::from_vec(self.height, self.width, self.channel(c).to_vec())
            .expect("channel plane matches tensor shape")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}
