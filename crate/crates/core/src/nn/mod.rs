//! Minimal CPU neural-network toolkit: conv/transposed-conv/batch-norm/
//! linear layers with analytic gradients, the classifier family, the
//! inversion decoder, the conversion net and two optimizers.

mod classifier;
mod decoder;
mod float;
pub mod layers;
pub mod ops;
mod optim;
mod param;

pub use classifier::{ArchitectureSpec, Classifier, ConvBlockSpec, Mode};
pub use decoder::{ConversionNet, DecoderSpec, InversionDecoder};
pub use float::Float;
pub use optim::{Optimizer, OptimizerKind};
pub use param::Param;

use ndarray::{Array2, Array4};

/// Mean cross-entropy of softmax `probs` against `labels`, and its gradient
/// w.r.t. the logits.
pub fn cross_entropy<F: Float>(probs: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let n = F::from_usize(labels.len()).expect("batch size");
    let tiny = F::lit(1e-12);
    let mut grad = probs.clone();
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(tiny).ln();
        grad[[i, y]] -= F::one();
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

/// Mean squared error over every element and its gradient.
pub fn mse<F: Float, D: ndarray::Dimension>(pred: &ndarray::Array<F, D>, target: &ndarray::Array<F, D>) -> (F, ndarray::Array<F, D>) {
    let n = F::from_usize(pred.len()).expect("element count");
    let diff = pred - target;
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let two = F::lit(2.0);
    (loss, diff.mapv(|d| two * d / n))
}

/// Convenience for callers holding `f32` images.
pub fn mse4(pred: &Array4<f32>, target: &Array4<f32>) -> (f32, Array4<f32>) {
    mse(pred, target)
}

#[cfg(test)]
mod tests;
