//! Conv-block classifiers (teacher, student and shadow models).
//!
//! Layers are numbered from 1: conv blocks first, then fully-connected
//! layers, the last of which feeds the softmax. "Layer K" throughout the
//! crate refers to this numbering.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, Activation, BatchNorm2d, BnCache, Conv2d, ConvCache, Linear, PoolCache};
use super::ops::softmax_rows;
use super::{Float, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer widths of a classifier. Each conv block is conv → batch-norm →
/// 2×2 max-pool → ReLU with "same" padding; hidden fully-connected layers use
/// ReLU and the last one has `num_classes` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_shape: (usize, usize, usize),
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub fc_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    /// Three conv blocks and two fully-connected layers for 1×32×32 digits.
    pub fn mnist(num_classes: usize) -> Self {
        Self::from_channels((1, 32, 32), &[16, 32, 32], 128, num_classes)
    }

    /// Four conv blocks and two fully-connected layers for 3×64×64 faces.
    pub fn faces(num_classes: usize) -> Self {
        Self::from_channels((3, 64, 64), &[16, 32, 64, 64], 256, num_classes)
    }

    pub fn from_channels(input_shape: (usize, usize, usize), channels: &[usize], hidden: usize, num_classes: usize) -> Self {
        Self {
            input_shape,
            conv_blocks: channels
                .iter()
                .map(|&c| ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                })
                .collect(),
            fc_dims: vec![hidden, num_classes],
            num_classes,
        }
    }

    /// Same network with a different output width.
    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        let mut spec = self.clone();
        if let Some(last) = spec.fc_dims.last_mut() {
            *last = num_classes;
        }
        spec.num_classes = num_classes;
        spec
    }

    pub fn layer_count(&self) -> usize {
        self.conv_blocks.len() + self.fc_dims.len()
    }

    /// `(C, H, W)` after the last conv block.
    pub fn conv_output_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = self.input_shape;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.stride == 0 || b.out_channels == 0 {
                return Err(Error::Shape(format!("conv block {} has a zero dimension", i + 1)));
            }
            let pad = b.kernel / 2;
            let oh = (h + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1);
            let ow = (w + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh >= 2 && ow >= 2 => {
                    h = oh / 2;
                    w = ow / 2;
                    c = b.out_channels;
                }
                _ => return Err(Error::Shape(format!("conv block {} collapses a {h}x{w} input", i + 1))),
            }
        }
        Ok((c, h, w))
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let (c, h, w) = self.conv_output_shape()?;
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.fc_dims.is_empty() {
            return Err(Error::Shape("at least one fully-connected layer is required".into()));
        }
        if self.fc_dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape("fully-connected widths must be positive".into()));
        }
        if *self.fc_dims.last().expect("non-empty") != self.num_classes {
            return Err(Error::Shape(format!(
                "last fully-connected width {} differs from num_classes {}",
                self.fc_dims.last().expect("non-empty"),
                self.num_classes
            )));
        }
        self.conv_output_shape()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock<F: Float> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
}

#[derive(Debug, Clone)]
struct BlockTape<F: Float> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
    pool: PoolCache,
    out: Array4<F>,
}

#[derive(Debug, Clone)]
struct Tape<F: Float> {
    depth: usize,
    blocks: Vec<BlockTape<F>>,
    /// Input to each fully-connected layer reached.
    dense_in: Vec<Array2<F>>,
    /// Post-ReLU output of each hidden fully-connected layer reached.
    dense_out: Vec<Array2<F>>,
    probs: Option<Array2<F>>,
}

/// Whether batch-norm in trainable blocks uses batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Rows processed per chunk by the allocation-bounded inference helpers.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct Classifier<F: Float = f32> {
    spec: ArchitectureSpec,
    blocks: Vec<ConvBlock<F>>,
    dense: Vec<Linear<F>>,
    trainable: Vec<bool>,
    tape: Option<Tape<F>>,
}

impl<F: Float> Classifier<F> {
    pub fn new<R: Rng>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut in_c = spec.input_shape.0;
        let blocks = spec
            .conv_blocks
            .iter()
            .map(|b| {
                let conv = Conv2d::new(in_c, b.out_channels, b.kernel, b.stride, b.kernel / 2, rng);
                in_c = b.out_channels;
                ConvBlock {
                    conv,
                    bn: BatchNorm2d::new(b.out_channels),
                }
            })
            .collect();
        let mut width = spec.feature_dim()?;
        let dense = spec
            .fc_dims
            .iter()
            .map(|&d| {
                let l = Linear::new(width, d, rng);
                width = d;
                l
            })
            .collect();
        let layers = spec.layer_count();
        Ok(Self {
            spec,
            blocks,
            dense,
            trainable: vec![true; layers],
            tape: None,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn layer_count(&self) -> usize {
        self.spec.layer_count()
    }

    pub fn conv_depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.input_shape
    }

    /// Freeze layers `1..=k`, unfreeze the rest.
    pub fn freeze_first(&mut self, k: usize) {
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = i >= k;
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.fill(false);
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) -> Result<()> {
        self.check_layer(layer)?;
        self.trainable[layer - 1] = trainable;
        Ok(())
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.layer_count() {
            return Err(Error::Argument(format!("layer index {k} outside 1..={}", self.layer_count())));
        }
        Ok(())
    }

    /// Swap the last fully-connected layer for a freshly initialized one
    /// with `num_classes` outputs (trainable).
    pub fn replace_head<R: Rng>(&mut self, num_classes: usize, rng: &mut R) {
        let last = self.dense.len() - 1;
        let input = self.dense[last].input_dim();
        self.dense[last] = Linear::new(input, num_classes, rng);
        self.spec = self.spec.with_num_classes(num_classes);
        let l = self.layer_count();
        self.trainable[l - 1] = true;
        self.tape = None;
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input {:?}",
                (c, h, w),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Forward to layer `depth`, optionally recording a tape.
    fn run(&self, x: &Array4<F>, depth: usize, mode: Mode, record: bool) -> (Array2<F>, Option<Tape<F>>) {
        let mut tape = Tape {
            depth,
            blocks: Vec::new(),
            dense_in: Vec::new(),
            dense_out: Vec::new(),
            probs: None,
        };
        let mut h = x.to_owned();
        let n = x.len_of(Axis(0));
        for (i, block) in self.blocks.iter().enumerate().take(depth) {
            let batch_stats = mode == Mode::Train && self.trainable[i];
            let (c, conv) = block.conv.forward(&h);
            let (b, bn) = block.bn.forward(&c, batch_stats);
            let (mut p, pool) = layers::max_pool2(&b);
            Activation::Relu.apply(&mut p);
            if record {
                tape.blocks.push(BlockTape {
                    conv,
                    bn,
                    pool,
                    out: p.clone(),
                });
            }
            h = p;
        }
        let flat_len = self.flat_len(depth.min(self.blocks.len()));
        let mut z = h
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, flat_len))
            .expect("flatten");
        let convs = self.blocks.len();
        if depth <= convs {
            return (z, record.then_some(tape));
        }
        let last = self.dense.len() - 1;
        for (j, layer) in self.dense.iter().enumerate().take(depth - convs) {
            let mut out = layer.forward(&z);
            if record {
                tape.dense_in.push(z);
            }
            if j < last {
                Activation::Relu.apply(&mut out);
                if record {
                    tape.dense_out.push(out.clone());
                }
            } else {
                out = softmax_rows(&out);
                if record {
                    tape.probs = Some(out.clone());
                }
            }
            z = out;
        }
        (z, record.then_some(tape))
    }

    fn flat_len(&self, blocks: usize) -> usize {
        if blocks == 0 {
            let (c, h, w) = self.spec.input_shape;
            return c * h * w;
        }
        let mut probe = self.spec.clone();
        probe.conv_blocks.truncate(blocks);
        probe.feature_dim().expect("validated spec")
    }

    fn run_blocks(&self, x: &Array4<F>, depth: usize) -> Array4<F> {
        let mut h = x.to_owned();
        for block in self.blocks.iter().take(depth) {
            let (c, _) = block.conv.forward(&h);
            let (b, _) = block.bn.forward(&c, false);
            let (mut p, _) = layers::max_pool2(&b);
            Activation::Relu.apply(&mut p);
            h = p;
        }
        h
    }

    /// Eval-mode forward to layer `depth` without a tape, in chunks.
    fn infer(&self, x: &Array4<F>, depth: usize) -> Array2<F> {
        let n = x.len_of(Axis(0));
        let mut chunks = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let xs = x.slice(s![start..end, .., .., ..]).to_owned();
            chunks.push(self.infer_chunk(&xs, depth));
            start = end;
        }
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("uniform chunk widths")
    }

    fn infer_chunk(&self, x: &Array4<F>, depth: usize) -> Array2<F> {
        let n = x.len_of(Axis(0));
        let convs = self.blocks.len();
        let h = self.run_blocks(x, depth.min(convs));
        let mut z = h
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.flat_len(depth.min(convs))))
            .expect("flatten");
        if depth <= convs {
            return z;
        }
        let last = self.dense.len() - 1;
        for (j, layer) in self.dense.iter().enumerate().take(depth - convs) {
            z = layer.forward(&z);
            if j < last {
                Activation::Relu.apply(&mut z);
            } else {
                z = softmax_rows(&z);
            }
        }
        z
    }

    /// Confidence vectors (eval mode). Rows sum to one.
    pub fn predict(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        Ok(self.infer(x, self.layer_count()))
    }

    /// Flattened eval-mode activation after layer `k` (1-based).
    pub fn activation_at(&self, x: &Array4<F>, k: usize) -> Result<Array2<F>> {
        self.check_layer(k)?;
        self.check_input(x)?;
        Ok(self.infer(x, k))
    }

    /// Flattened output of the conv prefix.
    pub fn features(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        Ok(self.infer(x, self.conv_depth()))
    }

    /// Recording forward pass to layer `depth`. In [`Mode::Train`] trainable
    /// blocks normalize with batch statistics and update their running
    /// estimates; frozen blocks always use running statistics.
    pub fn forward(&mut self, x: &Array4<F>, depth: usize, mode: Mode) -> Result<Array2<F>> {
        self.check_layer(depth)?;
        self.check_input(x)?;
        let (out, tape) = self.run(x, depth, mode, true);
        let tape = tape.expect("recorded");
        if mode == Mode::Train {
            for (i, bt) in tape.blocks.iter().enumerate() {
                if self.trainable[i] {
                    self.blocks[i].bn.update_running(&bt.bn);
                }
            }
        }
        self.tape = Some(tape);
        Ok(out)
    }

    /// Recording forward through every layer; returns probabilities.
    pub fn forward_full(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array2<F>> {
        let l = self.layer_count();
        self.forward(x, l, mode)
    }

    /// Backpropagate a gradient w.r.t. the output of the last recorded
    /// forward pass. Parameter gradients accumulate for trainable layers only.
    pub fn backward(&mut self, grad: &Array2<F>, input_grad: bool) -> Result<Option<Array4<F>>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Argument("backward without a recorded forward pass".into()))?;
        let g = if tape.depth == self.layer_count() {
            let probs = tape.probs.as_ref().expect("full forward records probabilities");
            super::ops::softmax_backward(probs, grad)
        } else {
            grad.clone()
        };
        Ok(self.backward_tape(&tape, g, input_grad))
    }

    /// Backpropagate a gradient w.r.t. the pre-softmax logits of the last
    /// full forward pass (the cross-entropy path).
    pub fn backward_logits(&mut self, dlogits: &Array2<F>, input_grad: bool) -> Result<Option<Array4<F>>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Argument("backward without a recorded forward pass".into()))?;
        if tape.depth != self.layer_count() {
            return Err(Error::Argument("logit gradient requires a full forward pass".into()));
        }
        Ok(self.backward_tape(&tape, dlogits.clone(), input_grad))
    }

    /// `g` is the gradient at the tape's depth (w.r.t. logits when the tape
    /// reaches the softmax).
    fn backward_tape(&mut self, tape: &Tape<F>, mut g: Array2<F>, input_grad: bool) -> Option<Array4<F>> {
        let convs = self.blocks.len();
        let dense_reached = tape.depth.saturating_sub(convs);
        let first_needed = if input_grad {
            0
        } else {
            match self.trainable.iter().position(|&t| t) {
                Some(i) if i < tape.depth => i,
                _ => return None,
            }
        };
        let last = self.dense.len() - 1;
        for j in (0..dense_reached).rev() {
            let layer_idx = convs + j;
            if j < last {
                g = Activation::Relu.backward(&tape.dense_out[j], &g);
            }
            let need_input = layer_idx > first_needed;
            let train = self.trainable[layer_idx];
            match self.dense[j].backward(&tape.dense_in[j], &g, train, need_input) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        let n = g.nrows();
        let mut g4 = if let Some(bt) = tape.blocks.last() {
            let (_, c, h, w) = bt.out.dim();
            g.into_shape_with_order((n, c, h, w)).expect("unflatten")
        } else {
            let (c, h, w) = self.spec.input_shape;
            return Some(g.into_shape_with_order((n, c, h, w)).expect("unflatten"));
        };
        for i in (0..tape.blocks.len()).rev() {
            let bt = &tape.blocks[i];
            let train = self.trainable[i];
            let dpool = Activation::Relu.backward(&bt.out, &g4);
            let dbn = layers::max_pool2_backward(&bt.pool, &dpool);
            let block = &mut self.blocks[i];
            let dconv = block.bn.backward(&bt.bn, &dbn, train, true).expect("input grad requested");
            let need_input = i > first_needed || (i == 0 && input_grad);
            match block.conv.backward(&bt.conv, &dconv, train, need_input) {
                Some(dx) => g4 = dx,
                None => return None,
            }
        }
        Some(g4)
    }

    /// Trainable parameters, in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        let convs = self.blocks.len();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if self.trainable[i] {
                out.extend(b.conv.params_mut());
                out.extend(b.bn.params_mut());
            }
        }
        for (j, d) in self.dense.iter_mut().enumerate() {
            if self.trainable[convs + j] {
                out.extend(d.params_mut());
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn reset_optimizer_state(&mut self) {
        for b in &mut self.blocks {
            b.conv
                .params_mut()
                .into_iter()
                .chain(b.bn.params_mut())
                .for_each(|p| p.reset_moments());
        }
        for d in &mut self.dense {
            d.params_mut().into_iter().for_each(|p| p.reset_moments());
        }
        self.tape = None;
    }

    fn layer_bytes(&self, layer: usize, out: &mut Vec<u8>) {
        let convs = self.blocks.len();
        let push = |a: &ndarray::ArrayD<F>, out: &mut Vec<u8>| a.iter().for_each(|v| v.write_le(out));
        if layer < convs {
            let b = &self.blocks[layer];
            push(&b.conv.weight.value, out);
            push(&b.conv.bias.value, out);
            push(&b.bn.gamma.value, out);
            push(&b.bn.beta.value, out);
            b.bn.running_mean.iter().for_each(|v| v.write_le(out));
            b.bn.running_var.iter().for_each(|v| v.write_le(out));
        } else {
            let d = &self.dense[layer - convs];
            push(&d.weight.value, out);
            push(&d.bias.value, out);
        }
    }

    /// Every parameter and running statistic, layer by layer, little-endian.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in 0..self.layer_count() {
            self.layer_bytes(l, &mut out);
        }
        out
    }

    /// Inverse of [`Self::state_bytes`] for a model built from the same spec.
    pub fn load_state_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let expected = self.state_bytes().len();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "parameter blob holds {} bytes, model needs {expected}",
                bytes.len()
            )));
        }
        let mut cursor = bytes.chunks_exact(F::BYTES).map(F::read_le);
        let mut fill = |a: &mut dyn Iterator<Item = &mut F>| {
            for v in a {
                *v = cursor.next().expect("length checked");
            }
        };
        for b in &mut self.blocks {
            fill(&mut b.conv.weight.value.iter_mut());
            fill(&mut b.conv.bias.value.iter_mut());
            fill(&mut b.bn.gamma.value.iter_mut());
            fill(&mut b.bn.beta.value.iter_mut());
            fill(&mut b.bn.running_mean.iter_mut());
            fill(&mut b.bn.running_var.iter_mut());
        }
        for d in &mut self.dense {
            fill(&mut d.weight.value.iter_mut());
            fill(&mut d.bias.value.iter_mut());
        }
        Ok(())
    }

    /// SHA-256 over the parameters and statistics of the selected layers
    /// (0-based indices).
    pub fn digest_layers(&self, layers: impl IntoIterator<Item = usize>) -> String {
        let mut bytes = Vec::new();
        for l in layers {
            self.layer_bytes(l, &mut bytes);
        }
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn digest(&self) -> String {
        self.digest_layers(0..self.layer_count())
    }

    /// Digest of the layers currently frozen.
    pub fn frozen_digest(&self) -> String {
        let frozen: Vec<usize> = (0..self.layer_count()).filter(|&i| !self.trainable[i]).collect();
        self.digest_layers(frozen)
    }

    /// Copy of the first `k` layers of `other` into `self` (same widths).
    pub fn copy_layers_from(&mut self, other: &Classifier<F>, k: usize) -> Result<()> {
        let convs = self.blocks.len();
        for l in 0..k {
            if l < convs {
                let (dst, src) = (&mut self.blocks[l], &other.blocks[l]);
                if dst.conv.weight.value.shape() != src.conv.weight.value.shape() {
                    return Err(Error::Shape(format!("conv block {} widths differ", l + 1)));
                }
                *dst = src.clone();
            } else {
                let j = l - convs;
                let (dst, src) = (&mut self.dense[j], &other.dense[j]);
                if dst.weight.value.shape() != src.weight.value.shape() {
                    return Err(Error::Shape(format!("fully-connected layer {} widths differ", l + 1)));
                }
                *dst = src.clone();
            }
        }
        self.reset_optimizer_state();
        Ok(())
    }
}
