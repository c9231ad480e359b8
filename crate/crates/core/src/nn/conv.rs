use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{join, Module, Param, Slot};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

const K: usize = 3;

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in * 9]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    input: Tensor<T>,
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * K + ky) * K + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - 1;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * K + ky) * K + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * w..(oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights scaled by fan-out, zero bias.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let std_dev = num_traits::Float::sqrt(2.0 / (out_channels * K * K) as f64);
        Conv2d {
            in_channels,
            out_channels,
            weight: Param::normal(&[out_channels, in_channels * K * K], std_dev, rng),
            bias: Param::new(Tensor::zeros(&[out_channels])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        x.expect_shape(&[usize::MAX, self.in_channels, usize::MAX, usize::MAX])?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let ck = self.in_channels * K * K;
        let mut y = Tensor::zeros(&[n, self.out_channels, h, w]);
        let mut cols = vec![T::zero(); ck * hw];
        for i in 0..n {
            im2col(x.item(i), self.in_channels, h, w, &mut cols);
            let out = y.item_mut(i);
            for (o, b) in self.bias.value.data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
            }
            T::gemm(
                self.out_channels,
                ck,
                hw,
                T::one(),
                self.weight.value.data(),
                ck as isize,
                1,
                &cols,
                hw as isize,
                1,
                T::one(),
                out,
                hw as isize,
                1,
            );
        }
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let x = &cache.input;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let ck = self.in_channels * K * K;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); ck * hw];
        let mut dcols: Vec<T> = vec![T::zero(); ck * hw];
        for i in 0..n {
            let g = dy.item(i);
            im2col(x.item(i), self.in_channels, h, w, &mut cols);
            // dW += dY (O x HW) * cols^T (HW x CK)
            T::gemm(
                self.out_channels,
                hw,
                ck,
                T::one(),
                g,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                T::one(),
                self.weight.grad.data_mut(),
                ck as isize,
                1,
            );
            for (o, db) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *db += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            // dcols = W^T (CK x O) * dY (O x HW)
            T::gemm(
                ck,
                self.out_channels,
                hw,
                T::one(),
                self.weight.value.data(),
                1,
                ck as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im(&dcols, self.in_channels, h, w, dx.item_mut(i));
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }
}
