//! Layers with explicit forward caches and hand-written backward passes.
//!
//! `forward` borrows the layer immutably and returns the activation plus
//! whatever the backward pass needs; `backward` accumulates parameter
//! gradients into [`Param::grad`] only when asked to.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis, Ix2};
use rand::Rng;

use super::ops::{self, ConvGeom};
use super::{Float, Param};

fn matrix<F: Float>(p: &Param<F>) -> ndarray::ArrayView2<'_, F> {
    p.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
}

fn matrix_grad<F: Float>(p: &mut Param<F>) -> ndarray::ArrayViewMut2<'_, F> {
    p.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d parameter")
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Float> {
    /// `(out, in·k·k)`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<F: Float> {
    cols: Array2<F>,
    geom: ConvGeom,
    n: usize,
}

impl<F: Float> Conv2d<F> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> Option<ConvGeom> {
        ConvGeom::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let geom = self.geom(h, w).expect("kernel fits input");
        let x = x.as_standard_layout();
        let cols = ops::im2col(x.as_slice().expect("standard layout"), n, &geom);
        let mut out = Array2::zeros((self.out_channels, cols.ncols()));
        general_mat_mul(F::one(), &matrix(&self.weight), &cols, F::zero(), &mut out);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.value.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = ops::cm_to_nchw(out.view(), n, geom.oh, geom.ow);
        (y, ConvCache { cols, geom, n })
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array4<F>, param_grads: bool, input_grad: bool) -> Option<Array4<F>> {
        let dym = ops::nchw_to_cm(dy);
        if param_grads {
            general_mat_mul(F::one(), &dym, &cache.cols.t(), F::one(), &mut matrix_grad(&mut self.weight));
            for (g, row) in self.bias.grad.iter_mut().zip(dym.rows()) {
                *g += row.sum();
            }
        }
        if !input_grad {
            return None;
        }
        let mut dcols = Array2::zeros(cache.cols.raw_dim());
        general_mat_mul(F::one(), &matrix(&self.weight).t(), &dym, F::zero(), &mut dcols);
        let g = cache.geom;
        let dx = ops::col2im(dcols.view(), cache.n, &g);
        Some(Array4::from_shape_vec((cache.n, g.channels, g.h, g.w), dx).expect("dx shape"))
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution; the adjoint of [`Conv2d`] with the same geometry.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Float> {
    /// `(in, out·k·k)`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct DeconvCache<F: Float> {
    xm: Array2<F>,
    geom: ConvGeom,
    n: usize,
}

impl<F: Float> ConvTranspose2d<F> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan = out_channels * kernel * kernel;
        let bound = 1.0 / (fan as f64).sqrt();
        Self {
            weight: Param::uniform(&[in_channels, fan], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Output spatial size for an `h×w` input, if positive.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |d: usize| ((d.checked_sub(1)? * self.stride + self.kernel).checked_sub(2 * self.pad)).filter(|&v| v > 0);
        Some((f(h)?, f(w)?))
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, DeconvCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "deconv input channels");
        let (oh, ow) = self.output_size(h, w).expect("valid transposed-conv geometry");
        let geom = ConvGeom::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad).expect("geometry");
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        let xm = ops::nchw_to_cm(x);
        let mut cols = Array2::zeros((geom.rows(), xm.ncols()));
        general_mat_mul(F::one(), &matrix(&self.weight).t(), &xm, F::zero(), &mut cols);
        let mut y = ops::col2im(cols.view(), n, &geom);
        let plane = oh * ow;
        for b in 0..n {
            for (ch, &bias) in self.bias.value.iter().enumerate() {
                let start = (b * self.out_channels + ch) * plane;
                y[start..start + plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        let y = Array4::from_shape_vec((n, self.out_channels, oh, ow), y).expect("deconv shape");
        (y, DeconvCache { xm, geom, n })
    }

    pub fn backward(&mut self, cache: &DeconvCache<F>, dy: &Array4<F>, param_grads: bool, input_grad: bool) -> Option<Array4<F>> {
        let dy = dy.as_standard_layout();
        let dcols = ops::im2col(dy.as_slice().expect("standard layout"), cache.n, &cache.geom);
        if param_grads {
            general_mat_mul(F::one(), &cache.xm, &dcols.t(), F::one(), &mut matrix_grad(&mut self.weight));
            for (ch, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dy.index_axis(Axis(1), ch).sum();
            }
        }
        if !input_grad {
            return None;
        }
        let mut dxm = Array2::zeros(cache.xm.raw_dim());
        general_mat_mul(F::one(), &matrix(&self.weight), &dcols, F::zero(), &mut dxm);
        Some(ops::cm_to_nchw(dxm.view(), cache.n, cache.geom.oh, cache.geom.ow))
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Per-channel batch normalization over N, H and W.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Float> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

#[derive(Debug, Clone)]
pub struct BnCache<F: Float> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    batch_stats: Option<(Array1<F>, Array1<F>)>,
}

impl<F: Float> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
        }
    }

    /// Batch statistics when `use_batch_stats`, running statistics otherwise.
    pub fn forward(&self, x: &Array4<F>, use_batch_stats: bool) -> (Array4<F>, BnCache<F>) {
        let (n, c, h, w) = x.dim();
        let plane = h * w;
        let count = F::from_usize(n * plane).expect("count");
        let x = x.as_standard_layout();
        let data = x.as_slice().expect("standard layout");
        let (mean, var, batch_stats) = if use_batch_stats {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let mut s = F::zero();
                for b in 0..n {
                    s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<F>();
                }
                let m = s / count;
                let mut v = F::zero();
                for b in 0..n {
                    for &x in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        v += (x - m) * (x - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (self.running_mean.clone(), self.running_var.clone(), None)
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = vec![F::zero(); data.len()];
        let mut y = vec![F::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let (m, is, g, bt) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(y[r.clone()].iter_mut()).zip(&data[r]) {
                    *xh = (xv - m) * is;
                    *yv = g * *xh + bt;
                }
            }
        }
        let shape = (n, c, h, w);
        (
            Array4::from_shape_vec(shape, y).expect("bn shape"),
            BnCache {
                xhat: Array4::from_shape_vec(shape, xhat).expect("bn shape"),
                inv_std,
                batch_stats,
            },
        )
    }

    /// Fold the batch statistics of a training forward pass into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache<F>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let (n, _, h, w) = cache.xhat.dim();
            let m = (n * h * w) as f64;
            let unbias = F::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            let mom = self.momentum;
            let keep = F::one() - mom;
            self.running_mean.zip_mut_with(mean, |r, &b| *r = keep * *r + mom * b);
            self.running_var.zip_mut_with(var, |r, &b| *r = keep * *r + mom * b * unbias);
        }
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array4<F>, param_grads: bool, input_grad: bool) -> Option<Array4<F>> {
        let (n, c, h, w) = dy.dim();
        let plane = h * w;
        let dy = dy.as_standard_layout();
        let dyd = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (&g, &x) in dyd[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * x;
                }
            }
        }
        if param_grads {
            for ch in 0..c {
                self.gamma.grad[ch] += sum_dy_xhat[ch];
                self.beta.grad[ch] += sum_dy[ch];
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx = vec![F::zero(); dyd.len()];
        let count = F::from_usize(n * plane).expect("count");
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                if cache.batch_stats.is_some() {
                    let mdy = sum_dy[ch] / count;
                    let mdyx = sum_dy_xhat[ch] / count;
                    for ((d, &g), &x) in dx[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xh[r]) {
                        *d = scale * (g - mdy - x * mdyx);
                    }
                } else {
                    for (d, &g) in dx[r.clone()].iter_mut().zip(&dyd[r]) {
                        *d = scale * g;
                    }
                }
            }
        }
        Some(Array4::from_shape_vec((n, c, h, w), dx).expect("bn dx shape"))
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<u32>,
    input_dim: (usize, usize, usize, usize),
}

pub fn max_pool2<F: Float>(x: &Array4<F>) -> (Array4<F>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let data = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for idx in [2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                out.push(plane[best]);
                argmax.push(best as u32);
            }
        }
    }
    (
        Array4::from_shape_vec((n, c, oh, ow), out).expect("pool shape"),
        PoolCache {
            argmax,
            input_dim: (n, c, h, w),
        },
    )
}

pub fn max_pool2_backward<F: Float>(cache: &PoolCache, dy: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = cache.input_dim;
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().expect("standard layout");
    let per = g.len() / (n * c).max(1);
    let mut dx = vec![F::zero(); n * c * h * w];
    for nc in 0..n * c {
        for j in 0..per {
            let k = nc * per + j;
            dx[nc * h * w + cache.argmax[k] as usize] += g[k];
        }
    }
    Array4::from_shape_vec((n, c, h, w), dx).expect("pool dx shape")
}

#[derive(Debug, Clone)]
pub struct Linear<F: Float> {
    /// `(out, in)`
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::uniform(&[output, input], bound, rng),
            bias: Param::uniform(&[output], bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        general_mat_mul(F::one(), x, &matrix(&self.weight).t(), F::zero(), &mut y);
        for mut row in y.rows_mut() {
            row.zip_mut_with(&self.bias.value, |v, &b| *v += b);
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>, param_grads: bool, input_grad: bool) -> Option<Array2<F>> {
        if param_grads {
            general_mat_mul(F::one(), &dy.t(), x, F::one(), &mut matrix_grad(&mut self.weight));
            for (g, col) in self.bias.grad.iter_mut().zip(dy.columns()) {
                *g += col.sum();
            }
        }
        input_grad.then(|| dy.dot(&matrix(&self.weight)))
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Elementwise activations; backward uses the cached output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<F: Float, D: ndarray::Dimension>(self, x: &mut ndarray::Array<F, D>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(F::zero())),
            Activation::Tanh => x.mapv_inplace(|v| v.tanh()),
            Activation::Sigmoid => x.mapv_inplace(|v| F::one() / (F::one() + (-v).exp())),
        }
    }

    /// `dy ⊙ f'(x)` expressed through `y = f(x)`.
    pub fn backward<F: Float, D: ndarray::Dimension>(self, y: &ndarray::Array<F, D>, dy: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        let mut out = dy.clone();
        match self {
            Activation::Relu => out.zip_mut_with(y, |g, &v| {
                if v <= F::zero() {
                    *g = F::zero()
                }
            }),
            Activation::Tanh => out.zip_mut_with(y, |g, &v| *g *= F::one() - v * v),
            Activation::Sigmoid => out.zip_mut_with(y, |g, &v| *g *= v * (F::one() - v)),
        }
        out
    }
}
