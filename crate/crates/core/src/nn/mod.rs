//! Layers with explicit forward/backward passes.
//!
//! Every layer returns a cache from `forward` that the matching `backward`
//! consumes, so one layer can be applied to several batches before any
//! gradient flows back. Parameter gradients accumulate into [`Param::grad`].

mod activation;
mod batchnorm;
mod block;
mod conv;
mod linear;
mod pool;

pub use activation::{relu, relu_backward, sigmoid};
pub use batchnorm::{BatchNorm2d, BnCache};
pub use block::{BlockCache, ConvBlock};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use pool::{max_pool2x2, max_pool2x2_backward, PoolCache};

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::tensor::{Real, Tensor};

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut value = Tensor::zeros(shape);
        for x in value.data_mut() {
            *x = T::of(rng.gen_range(-bound..=bound));
        }
        Param::new(value)
    }

    /// Gaussian with mean zero.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std_dev: f64, rng: &mut R) -> Self {
        let dist = rand_distr::Normal::new(0.0, std_dev).expect("finite standard deviation");
        let mut value = Tensor::zeros(shape);
        for x in value.data_mut() {
            *x = T::of(rng.sample(dist));
        }
        Param::new(value)
    }
}

/// What a visitor sees while walking a module.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-learned state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

/// A tree of named parameters and buffers.
///
/// Visit order is fixed by construction and doubles as the optimizer-state
/// and checkpoint layout.
pub trait Module<T: Real> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.grad.fill(T::zero());
            }
        });
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        let mut count = |_: &str, _: &Tensor<T>| n += 1;
        self.visit("", &mut count);
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
