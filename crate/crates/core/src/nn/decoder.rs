//! Transposed-conv inversion decoder and the fully-connected conversion net.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Activation, BatchNorm2d, BnCache, ConvTranspose2d, DeconvCache, Linear};
use super::{Float, Mode, Param};
use crate::error::{Error, Result};

/// Decoder layout: the first block lifts a `input_dim`-vector (as a 1×1 map)
/// to 4×4, every later block doubles the spatial size. Hidden block widths
/// halve from `base_channels · 2^(blocks-2)` down to `base_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub input_dim: usize,
    pub output_shape: (usize, usize, usize),
    pub blocks: usize,
    pub base_channels: usize,
}

impl DecoderSpec {
    pub fn new(input_dim: usize, output_shape: (usize, usize, usize), blocks: usize) -> Self {
        Self {
            input_dim,
            output_shape,
            blocks,
            base_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Shape(format!("decoder needs at least 2 blocks, got {}", self.blocks)));
        }
        if self.input_dim == 0 || self.base_channels == 0 {
            return Err(Error::Shape("decoder widths must be positive".into()));
        }
        let (c, h, w) = self.output_shape;
        let reach = 4usize.checked_shl((self.blocks - 1) as u32).unwrap_or(0);
        if c == 0 || h != reach || w != reach {
            return Err(Error::Shape(format!(
                "{} blocks upsample to {reach}x{reach}, cannot reach {h}x{w}",
                self.blocks
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let hidden = self.blocks - 1;
        let mut w: Vec<usize> = (0..hidden).map(|i| self.base_channels << (hidden - 1 - i)).collect();
        w.insert(0, self.input_dim);
        w.push(self.output_shape.0);
        w
    }
}

#[derive(Debug, Clone)]
struct DeconvBlock<F: Float> {
    deconv: ConvTranspose2d<F>,
    bn: Option<BatchNorm2d<F>>,
    act: Activation,
}

#[derive(Debug, Clone)]
struct DeconvTape<F: Float> {
    deconv: DeconvCache<F>,
    bn: Option<BnCache<F>>,
    out: Array4<F>,
}

/// Maps a vector to an image in `[0,1]`: transposed conv → batch-norm → Tanh
/// blocks, then a final transposed conv → Sigmoid.
#[derive(Debug, Clone)]
pub struct InversionDecoder<F: Float = f32> {
    spec: DecoderSpec,
    blocks: Vec<DeconvBlock<F>>,
    tape: Option<Vec<DeconvTape<F>>>,
}

impl<F: Float> InversionDecoder<F> {
    pub fn new<R: Rng>(spec: DecoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let blocks = (0..spec.blocks)
            .map(|i| {
                let (stride, pad) = if i == 0 { (1, 0) } else { (2, 1) };
                let last = i + 1 == spec.blocks;
                DeconvBlock {
                    deconv: ConvTranspose2d::new(widths[i], widths[i + 1], 4, stride, pad, rng),
                    bn: (!last).then(|| BatchNorm2d::new(widths[i + 1])),
                    act: if last { Activation::Sigmoid } else { Activation::Tanh },
                }
            })
            .collect();
        Ok(Self { spec, blocks, tape: None })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn check(&self, z: &Array2<F>) -> Result<()> {
        if z.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "decoder expects {}-dim input, got {}",
                self.spec.input_dim,
                z.ncols()
            )));
        }
        Ok(())
    }

    fn run(&self, z: &Array2<F>, mode: Mode, record: bool) -> (Array4<F>, Vec<DeconvTape<F>>) {
        let n = z.nrows();
        let mut h = z
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.spec.input_dim, 1, 1))
            .expect("lift to 1x1 map");
        let mut tape = Vec::new();
        for b in &self.blocks {
            let (y, dc) = b.deconv.forward(&h);
            let (mut y, bc) = match &b.bn {
                Some(bn) => {
                    let (y, c) = bn.forward(&y, mode == Mode::Train);
                    (y, Some(c))
                }
                None => (y, None),
            };
            b.act.apply(&mut y);
            if record {
                tape.push(DeconvTape {
                    deconv: dc,
                    bn: bc,
                    out: y.clone(),
                });
            }
            h = y;
        }
        (h, tape)
    }

    /// Eval-mode reconstruction; a pure function of the parameters and `z`.
    pub fn decode(&self, z: &Array2<F>) -> Result<Array4<F>> {
        self.check(z)?;
        let n = z.nrows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let zs = z.slice(ndarray::s![start..end, ..]).to_owned();
            parts.push(self.run(&zs, Mode::Eval, false).0);
            start = end;
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("uniform shapes"))
    }

    pub fn forward(&mut self, z: &Array2<F>, mode: Mode) -> Result<Array4<F>> {
        self.check(z)?;
        let (out, tape) = self.run(z, mode, true);
        if mode == Mode::Train {
            for (b, t) in self.blocks.iter_mut().zip(&tape) {
                if let (Some(bn), Some(c)) = (&mut b.bn, &t.bn) {
                    bn.update_running(c);
                }
            }
        }
        self.tape = Some(tape);
        Ok(out)
    }

    /// Backpropagate `dy` (w.r.t. the reconstructed image). Returns the
    /// gradient w.r.t. the input vector when `input_grad`.
    pub fn backward(&mut self, dy: &Array4<F>, input_grad: bool) -> Result<Option<Array2<F>>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Argument("backward without a recorded forward pass".into()))?;
        let mut g = dy.clone();
        for (i, (b, t)) in self.blocks.iter_mut().zip(&tape).enumerate().rev() {
            g = b.act.backward(&t.out, &g);
            if let (Some(bn), Some(c)) = (&mut b.bn, &t.bn) {
                g = bn.backward(c, &g, true, true).expect("input grad requested");
            }
            let need_input = i > 0 || input_grad;
            match b.deconv.backward(&t.deconv, &g, true, need_input) {
                Some(dx) => g = dx,
                None => {
                    debug_assert_eq!(i, 0);
                    return Ok(None);
                }
            }
        }
        let n = g.len_of(Axis(0));
        Ok(Some(g.into_shape_with_order((n, self.spec.input_dim)).expect("flatten")))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.deconv.params_mut());
            if let Some(bn) = &mut b.bn {
                out.extend(bn.params_mut());
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.deconv
                .weight
                .value
                .iter()
                .chain(b.deconv.bias.value.iter())
                .for_each(|v| v.write_le(&mut out));
            if let Some(bn) = &b.bn {
                bn.gamma
                    .value
                    .iter()
                    .chain(bn.beta.value.iter())
                    .chain(bn.running_mean.iter())
                    .chain(bn.running_var.iter())
                    .for_each(|v| v.write_le(&mut out));
            }
        }
        out
    }

    pub fn load_state_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let expected = self.state_bytes().len();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "decoder blob holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut cursor = bytes.chunks_exact(F::BYTES).map(F::read_le);
        for b in &mut self.blocks {
            let mut slots: Vec<&mut F> = b.deconv.weight.value.iter_mut().chain(b.deconv.bias.value.iter_mut()).collect();
            if let Some(bn) = &mut b.bn {
                slots.extend(
                    bn.gamma
                        .value
                        .iter_mut()
                        .chain(bn.beta.value.iter_mut())
                        .chain(bn.running_mean.iter_mut())
                        .chain(bn.running_var.iter_mut()),
                );
            }
            for s in slots {
                *s = cursor.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.state_bytes()))
    }
}

/// Fully-connected regressor (`in → hidden → hidden → out`, ReLU between,
/// linear output). Used as the conversion net from confidence vectors to
/// teacher features.
#[derive(Debug, Clone)]
pub struct ConversionNet<F: Float = f32> {
    layers: Vec<Linear<F>>,
    tape: Option<Vec<(Array2<F>, Array2<F>)>>,
}

impl<F: Float> ConversionNet<F> {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(Error::Shape("conversion net widths must be positive".into()));
        }
        let dims = [input_dim, hidden, hidden, output_dim];
        Ok(Self {
            layers: dims.windows(2).map(|d| Linear::new(d[0], d[1], rng)).collect(),
            tape: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("three layers").output_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    fn check(&self, x: &Array2<F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "conversion net expects {}-dim input, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Array2<F>) -> (Array2<F>, Vec<(Array2<F>, Array2<F>)>) {
        let mut h = x.clone();
        let mut tape = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.forward(&h);
            if i < last {
                Activation::Relu.apply(&mut y);
            }
            tape.push((h, y.clone()));
            h = y;
        }
        (h, tape)
    }

    pub fn apply(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.check(x)?;
        Ok(self.run(x).0)
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Result<Array2<F>> {
        self.check(x)?;
        let (y, tape) = self.run(x);
        self.tape = Some(tape);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Result<Array2<F>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Argument("backward without a recorded forward pass".into()))?;
        let last = self.layers.len() - 1;
        let mut g = dy.clone();
        for (i, (l, (x, y))) in self.layers.iter_mut().zip(&tape).enumerate().rev() {
            if i < last {
                g = Activation::Relu.backward(y, &g);
            }
            g = l.backward(x, &g, true, true).expect("input grad requested");
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.weight.value.iter().chain(l.bias.value.iter()).for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn load_state_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let expected = self.state_bytes().len();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "conversion blob holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut cursor = bytes.chunks_exact(F::BYTES).map(F::read_le);
        for l in &mut self.layers {
            for s in l.weight.value.iter_mut().chain(l.bias.value.iter_mut()) {
                *s = cursor.next().expect("length checked");
            }
        }
        Ok(())
    }
}
