//! Forward kernels shared by the eager API and the tape.
//!
//! Image-like tensors are laid out `B×C×H×W`. Bilinear upsampling follows the
//! align-corners-false convention: output coordinate `o` samples the input at
//! `(o + 0.5) / factor - 0.5`, clamped at the low edge, with the upper
//! neighbour clamped to the last row/column.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Tensor;
use crate::error::{contract, Result};

/// Norm below which a vector is treated as zero by [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is below [`COSINE_EPS`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        contract!("cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        contract!("axis {axis} out of range for shape {shape:?}");
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(logits.shape(), axis)?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Index of the largest entry along `axis`; ties resolve to the lowest index.
pub fn argmax(t: &Tensor, axis: usize) -> Result<Vec<usize>> {
    let (outer, len, inner) = axis_split(t.shape(), axis)?;
    let x = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut best = 0;
            for k in 1..len {
                if x[base + k * inner] > x[base + best * inner] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        contract!("{what}: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `a ⊙ m + c`, all operands of one shape.
pub fn mul_add(a: &Tensor, m: &Tensor, c: &Tensor) -> Result<Tensor> {
    add(&mul(a, m)?, c)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => contract!("{what} expects a B×C×H×W tensor, got {:?}", t.shape()),
    }
}

/// Mean over the channel axis: `B×C×H×W → B×1×H×W`.
pub fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(t, "channel_mean")?;
    let hw = h * w;
    let x = t.data();
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * hw..][..hw];
            for (o, &v) in out[bi * hw..][..hw].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    let inv = 1.0 / c as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![b, 1, h, w], out))
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [_, cin, h, wd] = dims4(x, "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(w, "conv2d weight")?;
        if wcin != cin || kh != kw {
            contract!(
                "conv2d weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            );
        }
        if b.shape() != [cout] {
            contract!("conv2d bias {:?} for {cout} output channels", b.shape());
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            contract!("conv2d geometry: input {h}×{wd}, kernel {kh}, pad {pad}, stride {stride}");
        }
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one image (`Cin×H×W`) into a `patch_len × out_len` matrix.
    pub(crate) fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = self.out_len();
        for ci in 0..self.in_channels {
            let plane = &img[ci * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let dst = &mut row[oy * self.out_w..][..self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..][..self.in_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters a column matrix back onto an image.
    pub(crate) fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = self.out_len();
        for ci in 0..self.in_channels {
            let plane = &mut img[ci * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..][..self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c ← op(a)·op(b) + beta·c` for row-major slices, where `op(a)` is `m×k`
/// and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if a_trans {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if b_trans {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Convolution forward. Returns the output and, when `keep_cols` is set, the
/// per-image unfolded inputs needed for the weight gradient.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    geom: &ConvGeom,
    keep_cols: bool,
) -> (Tensor, Vec<Vec<f64>>) {
    let batch = x.shape()[0];
    let (kp, n, cout) = (geom.patch_len(), geom.out_len(), geom.out_channels);
    let in_len = geom.in_channels * geom.in_h * geom.in_w;
    let mut out = vec![0.0; batch * cout * n];
    let mut saved = Vec::new();
    let mut cols = vec![0.0; kp * n];
    for bi in 0..batch {
        geom.im2col(&x.data()[bi * in_len..][..in_len], &mut cols);
        let dst = &mut out[bi * cout * n..][..cout * n];
        for (co, row) in dst.chunks_exact_mut(n).enumerate() {
            row.fill(b.data()[co]);
        }
        gemm(cout, kp, n, w.data(), false, &cols, false, 1.0, dst);
        if keep_cols {
            saved.push(cols.clone());
        }
    }
    (
        Tensor::from_parts(vec![batch, cout, geom.out_h, geom.out_w], out),
        saved,
    )
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(x, w, b, stride, pad)?;
    Ok(conv2d_forward(x, w, b, &geom, false).0)
}

/// Per-axis interpolation table: (low index, high index, low weight, high weight).
pub(crate) fn interp_table(len_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = 1.0 / factor as f64;
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn bilinear_upsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(t, "bilinear_upsample")?;
    if factor == 0 {
        contract!("upsample factor must be positive");
    }
    let (ty, tx) = (interp_table(h, factor), interp_table(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let x = t.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}
