//! Base classifier, Grad-CAM heatmaps and object-region extraction.
//!
//! The base classifier is trained on the base classes only; its last
//! convolutional maps `A^k` and pre-softmax logits `y^c` drive the heatmap
//! `ReLU(sum_k alpha_k^c A^k)` with `alpha_k^c` the spatial mean of
//! `d y^c / d A^k`. For classes it has never seen, the heatmap is taken for
//! the highest-scoring base class.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{gap, gap_backward, Encoder, EncoderCache, CHANNELS};
use crate::error::{invalid, Error, Result};
use crate::imageops::{bounding_box, crop, largest_component, resize_bilinear, BoxRegion};
use crate::nn::{join, Linear, Module, Slot};
use crate::tensor::{Real, Tensor};

/// Conv-4 backbone, global average pooling and one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseClassifier<T> {
    pub backbone: Encoder<T>,
    pub fc: Linear<T>,
}

/// Per-map Grad-CAM weights for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct CamWeights<T> {
    pub alpha: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    /// `[h, w]` at the feature-map resolution, nonnegative.
    pub values: Tensor<T>,
    pub source_class: usize,
}

pub struct ClassifierCache<T> {
    backbone: EncoderCache<T>,
    pooled: Tensor<T>,
    map_hw: (usize, usize),
}

impl<T: Real> BaseClassifier<T> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        BaseClassifier { backbone: Encoder::new(3, rng), fc: Linear::new(CHANNELS, num_classes, rng) }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features
    }

    /// Last convolutional maps `A` for a batch, `[n, 64, h, w]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.encode(images)
    }

    /// Logits computed from given final maps.
    pub fn logits_from_features(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.forward(&gap(maps)?)
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_from_features(&self.features(images)?)
    }

    pub fn forward_train(&mut self, images: &Tensor<T>) -> Result<(Tensor<T>, ClassifierCache<T>)> {
        let (maps, backbone) = self.backbone.forward(images, true)?;
        let pooled = gap(&maps)?;
        let logits = self.fc.forward(&pooled)?;
        let map_hw = (maps.shape()[2], maps.shape()[3]);
        Ok((logits, ClassifierCache { backbone, pooled, map_hw }))
    }

    pub fn backward(&mut self, cache: &ClassifierCache<T>, dlogits: &Tensor<T>) {
        let dpooled = self.fc.backward(&cache.pooled, dlogits);
        let dmaps = gap_backward(&dpooled, cache.map_hw.0, cache.map_hw.1);
        self.backbone.backward(&cache.backbone, &dmaps);
    }

    /// Mean softmax cross-entropy over a batch, accumulating gradients.
    /// Returns the loss and the number of correct argmax predictions.
    pub fn accumulate_gradients(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<(T, usize)> {
        let k = self.num_classes();
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        let (logits, cache) = self.forward_train(images)?;
        let n = T::of(labels.len().max(1) as f64);
        let mut dlogits = Tensor::zeros(logits.shape());
        let mut loss = T::zero();
        let mut correct = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.item(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            loss += denom.ln() + max - row[label];
            if argmax_lowest(row) == label {
                correct += 1;
            }
            for (c, d) in dlogits.item_mut(i).iter_mut().enumerate() {
                let p = (row[c] - max).exp() / denom;
                *d = (p - if c == label { T::one() } else { T::zero() }) / n;
            }
        }
        self.backward(&cache, &dlogits);
        Ok((loss / n, correct))
    }

    /// Gradient of logit `class_index` w.r.t. the final maps of one image, `[64, h, w]`.
    /// Only the chosen logit is seeded, every other logit receives zero gradient.
    pub fn logit_gradient(&self, maps: &Tensor<T>, class_index: usize) -> Result<Tensor<T>> {
        maps.expect_shape(&[1, usize::MAX, usize::MAX, usize::MAX])?;
        let k = self.num_classes();
        if class_index >= k {
            return Err(Error::LabelOutOfRange { label: class_index, classes: k });
        }
        let mut seed = Tensor::zeros(&[1, k]);
        seed.data_mut()[class_index] = T::one();
        let dpooled = self.fc.backward_input(&seed);
        let (h, w) = (maps.shape()[2], maps.shape()[3]);
        let g = gap_backward(&dpooled, h, w);
        g.reshape(&maps.shape()[1..])
    }

    /// `alpha_k = (1/Z) sum_ij d y^c / d A^k_ij` for a single `[3, s, s]` image.
    pub fn cam_weights(&self, image: &Tensor<T>, class_index: usize) -> Result<CamWeights<T>> {
        let maps = self.image_maps(image)?;
        self.cam_weights_for_maps(&maps, class_index)
    }

    pub fn cam_weights_for_maps(&self, maps: &Tensor<T>, class_index: usize) -> Result<CamWeights<T>> {
        let grad = self.logit_gradient(maps, class_index)?;
        let s = grad.shape();
        let z = s[1] * s[2];
        let zt = T::of(z as f64);
        let alpha = (0..s[0]).map(|k| grad.data()[k * z..(k + 1) * z].iter().copied().sum::<T>() / zt).collect();
        Ok(CamWeights { alpha })
    }

    fn image_maps(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let single = match image.shape().len() {
            3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
            _ => {
                image.expect_shape(&[1, usize::MAX, usize::MAX, usize::MAX])?;
                image.clone()
            }
        };
        self.features(&single)
    }

    pub fn gradcam(&self, image: &Tensor<T>, class_index: usize) -> Result<Heatmap<T>> {
        let maps = self.image_maps(image)?;
        let weights = self.cam_weights_for_maps(&maps, class_index)?;
        let s = maps.shape().to_vec();
        let maps = maps.reshape(&[s[1], s[2], s[3]])?;
        let values = weighted_map_sum(&weights.alpha, &maps)?;
        Ok(Heatmap { values, source_class: class_index })
    }

    /// Highest base-class logit, ties to the lowest index.
    pub fn pick_class_for_novel(&self, image: &Tensor<T>) -> Result<usize> {
        let maps = self.image_maps(image)?;
        let logits = self.logits_from_features(&maps)?;
        Ok(argmax_lowest(logits.item(0)))
    }
}

impl<T: Real> Module<T> for BaseClassifier<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
}

pub fn argmax_lowest<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `ReLU(sum_k alpha_k A^k)` over `[K, h, w]` maps, returning `[h, w]`.
pub fn weighted_map_sum<T: Real>(alpha: &[T], maps: &Tensor<T>) -> Result<Tensor<T>> {
    maps.expect_shape(&[alpha.len(), usize::MAX, usize::MAX])?;
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let z = h * w;
    let mut out = vec![T::zero(); z];
    for (k, &a) in alpha.iter().enumerate() {
        for (o, &m) in out.iter_mut().zip(&maps.data()[k * z..(k + 1) * z]) {
            *o += a * m;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(T::zero()));
    Tensor::from_vec(&[h, w], out)
}

/// Crop box for `heatmap` upsampled to `out_h x out_w`: pixels at or above
/// `threshold_frac * max`, largest 4-connected component, tight box.
/// `None` when the heatmap has no positive value.
pub fn region_box<T: Real>(
    heatmap: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    threshold_frac: f64,
) -> Result<Option<BoxRegion>> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(invalid("threshold fraction must lie in (0, 1)"));
    }
    heatmap.expect_shape(&[usize::MAX, usize::MAX])?;
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let up = resize_bilinear(&heatmap.clone().reshape(&[1, h, w])?, out_h, out_w)?;
    let max = up.data().iter().fold(T::zero(), |m, &v| m.max(v));
    if max <= T::zero() || !max.is_finite() {
        return Ok(None);
    }
    let cut = max * T::of(threshold_frac);
    let mask: Vec<bool> = up.data().iter().map(|&v| v >= cut).collect();
    Ok(bounding_box(&largest_component(&mask, out_h, out_w), out_w))
}

/// Object-level crop of a `[3, H, W]` image, rescaled back to `H x W`.
/// An all-zero heatmap returns the image unchanged.
pub fn extract_region<T: Real>(image: &Tensor<T>, heatmap: &Heatmap<T>, threshold_frac: f64) -> Result<Tensor<T>> {
    image.expect_shape(&[usize::MAX, usize::MAX, usize::MAX])?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    match region_box(&heatmap.values, h, w, threshold_frac)? {
        None => Ok(image.clone()),
        Some(b) if b.height() == h && b.width() == w => Ok(image.clone()),
        Some(b) => resize_bilinear(&crop(image, b)?, h, w),
    }
}
