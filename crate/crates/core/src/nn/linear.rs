use rand::Rng;

use super::{join, Module, Param, Slot};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Fully connected layer, `y = x W^T + b` over `[N, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    /// Weights and biases uniform in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / num_traits::Float::sqrt(in_features as f64);
        Linear {
            in_features,
            out_features,
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_shape(&[usize::MAX, self.in_features])?;
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            self.in_features as isize,
            1,
            self.weight.value.data(),
            1,
            self.in_features as isize,
            T::one(),
            y.data_mut(),
            self.out_features as isize,
            1,
        );
        Ok(y)
    }

    /// Input gradient only; parameters are left untouched.
    pub fn backward_input(&self, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.batch();
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            self.out_features as isize,
            1,
            self.weight.value.data(),
            self.in_features as isize,
            1,
            T::zero(),
            dx.data_mut(),
            self.in_features as isize,
            1,
        );
        dx
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.batch();
        // dW += dy^T x
        T::gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            dy.data(),
            1,
            self.out_features as isize,
            x.data(),
            self.in_features as isize,
            1,
            T::one(),
            self.weight.grad.data_mut(),
            self.in_features as isize,
            1,
        );
        for i in 0..n {
            for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(dy.item(i)) {
                *b += g;
            }
        }
        self.backward_input(dy)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }
}
