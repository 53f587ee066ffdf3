//! Forward and backward kernels: same-padded convolution via im2col + GEMM,
//! 2x2 max pooling and inverted dropout.

use crate::grid::Tensor;

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
///
/// Strides are passed explicitly so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the index range implied by its
    // dimensions and strides; callers derive both from the same shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `k×k` neighbourhoods (zero padding `k/2`) into a
/// `(channels*k*k) × (h*w)` matrix.
pub fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    if k == 1 {
        return x.data.clone();
    }
    let (c, h, w) = x.shape();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = x.channel(ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dr = ki as isize - pad;
                let dc = kj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dr;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sr as usize * w..(sr as usize + 1) * w];
                    let out = &mut dst[r * w..(r + 1) * w];
                    let c_lo = (-dc).max(0) as usize;
                    let c_hi = (w as isize - dc).min(w as isize) as usize;
                    if c_lo < c_hi {
                        let s_lo = (c_lo as isize + dc) as usize;
                        out[c_lo..c_hi].copy_from_slice(&src_row[s_lo..s_lo + (c_hi - c_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Tensor {
    let mut x = Tensor::zeros(channels, h, w);
    if k == 1 {
        x.data.copy_from_slice(cols);
        return x;
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..channels {
        let plane = x.channel_mut(ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dr = ki as isize - pad;
                let dc = kj as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dr;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let c_lo = (-dc).max(0) as usize;
                    let c_hi = (w as isize - dc).min(w as isize) as usize;
                    for c in c_lo..c_hi {
                        plane[sr as usize * w + (c as isize + dc) as usize] += src[r * w + c];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded convolution. `weight` is `out × in × k × k`.
pub fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_c: usize, k: usize) -> (Tensor, Vec<f64>) {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let kk = c * k * k;
    let cols = im2col(x, k);
    let mut y = Tensor::zeros(out_c, h, w);
    gemm(out_c, kk, hw, weight, (kk as isize, 1), &cols, (hw as isize, 1), &mut y.data, false);
    for (o, &b) in bias.iter().enumerate() {
        y.channel_mut(o).iter_mut().for_each(|v| *v += b);
    }
    (y, cols)
}

/// Accumulates weight/bias gradients and optionally returns the input
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input_shape: (usize, usize, usize),
    cols: &[f64],
    weight: &[f64],
    dy: &Tensor,
    k: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Option<Tensor> {
    let (c, h, w) = input_shape;
    let hw = h * w;
    let kk = c * k * k;
    let out_c = dy.channels;
    // dW += dY · colsᵀ
    gemm(out_c, hw, kk, &dy.data, (hw as isize, 1), cols, (1, hw as isize), dweight, true);
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dy.channel(o).iter().sum::<f64>();
    }
    if !need_dx {
        return None;
    }
    // dcols = Wᵀ · dY
    let mut dcols = vec![0.0; kk * hw];
    gemm(kk, out_c, hw, weight, (1, kk as isize), &dy.data, (hw as isize, 1), &mut dcols, false);
    Some(col2im(&dcols, c, h, w, k))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index of its maximum.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = base + 2 * r * w + 2 * col;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + dr) * w + 2 * col + dc;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + r) * ow + col;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u32], input_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_in_place(dy: &mut Tensor, output: &Tensor) {
    for (g, &y) in dy.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}
