//! Low-level tensor kernels: im2col/col2im, layout shuffles, softmax.

use ndarray::{Array2, Array4, ArrayView2};

use super::Float;

/// Geometry of a strided, zero-padded square-kernel convolution from an
/// `h×w` input to an `oh×ow` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit.
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(kernel)?;
        let span_w = (w + 2 * pad).checked_sub(kernel)?;
        if stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold `x` (N×C×H×W, standard layout) into a `(C·k·k) × (N·oh·ow)` matrix.
pub fn im2col<F: Float>(x: &[F], n: usize, g: &ConvGeom) -> Array2<F> {
    let cols = n * g.oh * g.ow;
    let mut out = vec![F::zero(); g.rows() * cols];
    let (k, s, p) = (g.kernel as isize, g.stride as isize, g.pad as isize);
    let plane = g.h * g.w;
    let image = g.channels * plane;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * g.kernel + ky as usize) * g.kernel + kx as usize;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let src = &x[b * image + c * plane..b * image + (c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ky - p;
                        let base = (b * g.oh + oy) * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = ox as isize * s + kx - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), cols), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-add columns back to an N×C×H×W buffer.
pub fn col2im<F: Float>(cols: ArrayView2<'_, F>, n: usize, g: &ConvGeom) -> Vec<F> {
    let cols = cols.as_standard_layout();
    let width = n * g.oh * g.ow;
    let plane = g.h * g.w;
    let image = g.channels * plane;
    let mut out = vec![F::zero(); n * image];
    let (k, s, p) = (g.kernel as isize, g.stride as isize, g.pad as isize);
    let data = cols.as_slice().expect("standard layout");
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * g.kernel + ky as usize) * g.kernel + kx as usize;
                let src = &data[row * width..(row + 1) * width];
                for b in 0..n {
                    let dst = &mut out[b * image + c * plane..b * image + (c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s + ky - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.oh + oy) * g.ow;
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = ox as isize * s + kx - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(C, N·H·W)` matrix → N×C×H×W tensor.
pub fn cm_to_nchw<F: Float>(m: ArrayView2<'_, F>, n: usize, h: usize, w: usize) -> Array4<F> {
    let c = m.nrows();
    let m = m.as_standard_layout();
    let data = m.as_slice().expect("standard layout");
    let plane = h * w;
    let mut out = vec![F::zero(); n * c * plane];
    for ch in 0..c {
        for b in 0..n {
            let src = &data[ch * n * plane + b * plane..ch * n * plane + (b + 1) * plane];
            out[(b * c + ch) * plane..(b * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("nchw shape")
}

/// N×C×H×W tensor → `(C, N·H·W)` matrix.
pub fn nchw_to_cm<F: Float>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let data = x.as_slice().expect("standard layout");
    let plane = h * w;
    let mut out = vec![F::zero(); n * c * plane];
    for ch in 0..c {
        for b in 0..n {
            out[ch * n * plane + b * plane..ch * n * plane + (b + 1) * plane]
                .copy_from_slice(&data[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        }
    }
    Array2::from_shape_vec((c, n * plane), out).expect("cm shape")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Float>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient w.r.t. logits given gradient w.r.t. softmax probabilities.
pub fn softmax_backward<F: Float>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot: F = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
        for ((o, &pi), &gi) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = pi * (gi - dot);
        }
    }
    out
}
