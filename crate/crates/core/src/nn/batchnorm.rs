use alloc::vec;
use alloc::vec::Vec;

use super::{join, Module, Param, Slot};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// Training mode normalizes with the batch statistics and updates the
/// running averages; inference mode uses the running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::of(0.1),
            eps: T::of(1e-5),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BnCache<T>)> {
        x.expect_shape(&[usize::MAX, self.channels, usize::MAX, usize::MAX])?;
        let (n, c) = (x.shape()[0], self.channels);
        let hw = x.shape()[2] * x.shape()[3];
        let m = n * hw;
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x.item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / T::of(m as f64);
                let mut v = T::zero();
                for b in 0..n {
                    for &val in &x.item(b)[ch * hw..(ch + 1) * hw] {
                        v += (val - mu) * (val - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / T::of(m as f64);
            }
            let unbias = if m > 1 { T::of(m as f64 / (m - 1) as f64) } else { T::one() };
            let keep = T::one() - self.momentum;
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = keep * *rm + self.momentum * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = keep * *rv + self.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            let xi = xhat.item_mut(b);
            let yi = y.item_mut(b);
            for ch in 0..c {
                let g = self.gamma.value.data()[ch];
                let be = self.beta.value.data()[ch];
                for p in ch * hw..(ch + 1) * hw {
                    let h = (xi[p] - mean[ch]) * inv_std[ch];
                    xi[p] = h;
                    yi[p] = g * h + be;
                }
            }
        }
        Ok((y, BnCache { xhat, inv_std, train }))
    }

    /// Inference-mode forward pass with the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_shape(&[usize::MAX, self.channels, usize::MAX, usize::MAX])?;
        let hw = x.shape()[2] * x.shape()[3];
        let mut y = x.clone();
        for b in 0..x.batch() {
            let yi = y.item_mut(b);
            for ch in 0..self.channels {
                let inv = T::one() / (self.running_var.data()[ch] + self.eps).sqrt();
                let scale = self.gamma.value.data()[ch] * inv;
                let shift = self.beta.value.data()[ch] - self.running_mean.data()[ch] * scale;
                for v in &mut yi[ch * hw..(ch + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c) = (dy.shape()[0], self.channels);
        let hw = dy.shape()[2] * dy.shape()[3];
        let m = T::of((n * hw) as f64);
        let mut dx = dy.clone();
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let g = &dy.item(b)[ch * hw..(ch + 1) * hw];
                let h = &cache.xhat.item(b)[ch * hw..(ch + 1) * hw];
                for (&gv, &hv) in g.iter().zip(h) {
                    sum_dy += gv;
                    sum_dy_xhat += gv * hv;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
            for b in 0..n {
                let h = &cache.xhat.item(b)[ch * hw..(ch + 1) * hw];
                let d = &mut dx.item_mut(b)[ch * hw..(ch + 1) * hw];
                for (dv, &hv) in d.iter_mut().zip(h) {
                    *dv = if cache.train { scale * (*dv - sum_dy / m - hv * sum_dy_xhat / m) } else { scale * *dv };
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma.value);
        f(&join(prefix, "beta"), &self.beta.value);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
}
