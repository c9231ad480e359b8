use rand::Rng;

use super::{
    join, max_pool2x2, max_pool2x2_backward, relu, relu_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, Module,
    PoolCache, Slot,
};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// 3x3 convolution, batch norm, ReLU, then an optional 2x2 max pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub pool: bool,
}

pub struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    activated: Tensor<T>,
    pool: Option<PoolCache>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, pool: bool, rng: &mut R) -> Self {
        ConvBlock { conv: Conv2d::new(in_channels, out_channels, rng), bn: BatchNorm2d::new(out_channels), pool }
    }

    pub fn out_size(&self, size: usize) -> usize {
        if self.pool {
            size / 2
        } else {
            size
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (c, conv) = self.conv.forward(x)?;
        let (b, bn) = self.bn.forward(&c, train)?;
        let activated = relu(&b);
        let (y, pool) = if self.pool {
            let (p, cache) = max_pool2x2(&activated);
            (p, Some(cache))
        } else {
            (activated.clone(), None)
        };
        Ok((y, BlockCache { conv, bn, activated, pool }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, _) = self.conv.forward(x)?;
        let y = relu(&self.bn.infer(&c)?);
        Ok(if self.pool { max_pool2x2(&y).0 } else { y })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = match &cache.pool {
            Some(p) => max_pool2x2_backward(p, dy),
            None => dy.clone(),
        };
        let d = relu_backward(&cache.activated, &d);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d)
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
