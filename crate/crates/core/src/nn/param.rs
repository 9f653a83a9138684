use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Float;

/// A trainable tensor with its gradient and optimizer moments.
#[derive(Debug, Clone)]
pub struct Param<F: Float> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub(crate) moment1: Option<ArrayD<F>>,
    pub(crate) moment2: Option<ArrayD<F>>,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            moment1: None,
            moment2: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(dist.sample(rng)));
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn reset_moments(&mut self) {
        self.moment1 = None;
        self.moment2 = None;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
