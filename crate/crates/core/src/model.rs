//! The assembled similarity model: shared extractor, level adjusters and
//! similarity head, trained end to end on episodes.

use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{fuse_batch, gap, gap_backward, Adjusters, Encoder, Levels, MapAdjuster, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{join, Module, Slot};
use crate::relation::{
    class_means, episode_loss_grad, map_pairs, pair_rows, pair_rows_backward, LossKind, SimilarityHead,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side of the square input images.
    pub image_size: usize,
    /// Common dimension `D` of the adjusted level vectors.
    pub fused_dim: usize,
    /// Hidden width of the similarity head.
    pub hidden: usize,
    pub levels: Levels,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 84, fused_dim: 64, hidden: 8, levels: Levels::IGO, loss: LossKind::Mse }
    }
}

/// One episode's tensors. Support rows are labelled with local labels in `0..c_way`.
#[derive(Clone, Debug)]
pub struct EpisodeBatch<T> {
    pub c_way: usize,
    pub support: Tensor<T>,
    pub support_crops: Option<Tensor<T>>,
    pub support_labels: Vec<usize>,
    pub query: Tensor<T>,
    pub query_crops: Option<Tensor<T>>,
    pub query_labels: Vec<usize>,
}

/// Per-image representation consumed by the pairing stage: fused `[n, D]`
/// vectors, or raw `[n, 64, h, w]` maps for the image-level-only pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T>(pub Tensor<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct MlsmModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    /// In image-level-only mode the image adjuster takes 128-channel map pairs
    /// and the head takes its `D` output directly.
    pub adjusters: Adjusters<T>,
    pub head: SimilarityHead<T>,
}

impl<T: Real> MlsmModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(3, rng);
        let map = encoder.map_size(config.image_size);
        if map == 0 {
            return Err(crate::error::invalid("image size too small for the extractor"));
        }
        let d = config.fused_dim;
        let mut adjusters = Adjusters::new(map, d, rng);
        let head = if config.levels == Levels::I {
            adjusters.image = MapAdjuster::new(2 * CHANNELS, map, d, rng);
            SimilarityHead::new(d, config.hidden, rng)
        } else {
            SimilarityHead::new(2 * d, config.hidden, rng)
        };
        Ok(MlsmModel { config, encoder, adjusters, head })
    }

    fn needs_crops(&self) -> bool {
        self.config.levels.uses_object()
    }

    fn check_images(&self, images: &Tensor<T>, crops: Option<&Tensor<T>>) -> Result<()> {
        let s = self.config.image_size;
        images.expect_shape(&[usize::MAX, 3, s, s])?;
        if self.needs_crops() {
            let c = crops.ok_or(Error::Empty("object crops"))?;
            c.expect_shape(images.shape())?;
        }
        Ok(())
    }

    /// Inference-mode representation of a batch of images.
    pub fn embed(&self, images: &Tensor<T>, crops: Option<&Tensor<T>>) -> Result<Embeddings<T>> {
        self.check_images(images, crops)?;
        if self.config.levels == Levels::I {
            return Ok(Embeddings(self.encoder.encode(images)?));
        }
        let levels = self.config.levels;
        let fused = crate::encoder::encode_all_levels(&self.encoder, &self.adjusters, images, crops, levels)?;
        Ok(Embeddings(fused))
    }

    /// Relation scores `[n_query, c_way]` from precomputed embeddings.
    pub fn score_embeddings(
        &self,
        support: &Embeddings<T>,
        support_labels: &[usize],
        query: &Embeddings<T>,
        c_way: usize,
    ) -> Result<Tensor<T>> {
        let reps = class_means(&support.0, support_labels, c_way)?;
        let n = query.0.batch();
        let scores = if self.config.levels == Levels::I {
            let pairs = map_pairs(&reps, &query.0);
            let v = self.adjusters.image.infer(&pairs)?;
            self.head.forward(&v)?.0
        } else {
            self.head.forward(&pair_rows(&reps, &query.0))?.0
        };
        scores.reshape(&[n, c_way])
    }

    /// Inference-mode score matrix for an episode.
    pub fn episode_scores(&self, batch: &EpisodeBatch<T>) -> Result<Tensor<T>> {
        let s = self.embed(&batch.support, batch.support_crops.as_ref())?;
        let q = self.embed(&batch.query, batch.query_crops.as_ref())?;
        self.score_embeddings(&s, &batch.support_labels, &q, batch.c_way)
    }

    /// Training-mode forward and backward pass over one episode.
    ///
    /// Gradients are accumulated into the parameters (call `zero_grad` first);
    /// returns the episode loss.
    pub fn accumulate_gradients(&mut self, batch: &EpisodeBatch<T>) -> Result<T> {
        self.check_images(&batch.support, batch.support_crops.as_ref())?;
        self.check_images(&batch.query, batch.query_crops.as_ref())?;
        if batch.support_labels.len() != batch.support.batch() || batch.query_labels.len() != batch.query.batch() {
            return Err(crate::error::invalid("label count does not match image count"));
        }
        let (ns, nq, c_way) = (batch.support.batch(), batch.query.batch(), batch.c_way);
        let n = ns + nq;
        let images = batch.support.concat_batch(&batch.query)?;
        let input = if self.needs_crops() {
            let crops =
                batch.support_crops.as_ref().zip(batch.query_crops.as_ref()).ok_or(Error::Empty("object crops"))?;
            images.concat_batch(&crops.0.concat_batch(crops.1)?)?
        } else {
            images
        };
        let (maps, enc_cache) = self.encoder.forward(&input, true)?;
        let i_map = maps.slice_batch(0, n);
        let (h, w) = (maps.shape()[2], maps.shape()[3]);
        let counts: Vec<usize> = (0..c_way).map(|c| batch.support_labels.iter().filter(|&&l| l == c).count()).collect();

        let (loss, dmaps) = if self.config.levels == Levels::I {
            let sup = i_map.slice_batch(0, ns);
            let qry = i_map.slice_batch(ns, n);
            let class_maps = class_means(&sup, &batch.support_labels, c_way)?;
            let pairs = map_pairs(&class_maps, &qry);
            let (v, adj_cache) = self.adjusters.image.forward(&pairs, true)?;
            let (scores, head_cache) = self.head.forward(&v)?;
            let (loss, dscores) =
                episode_loss_grad(&scores.reshape(&[nq, c_way])?, &batch.query_labels, self.config.loss)?;
            let dv = self.head.backward(&head_cache, &dscores.reshape(&[nq * c_way, 1])?);
            let dpairs = self.adjusters.image.backward(&adj_cache, &dv);
            let per = CHANNELS * h * w;
            let dpairs = dpairs.reshape(&[nq * c_way, 2 * per])?;
            let (dclass, dqry) = pair_rows_backward(&dpairs, c_way, nq, per);
            let dsup = spread_class_grad(&dclass, &batch.support_labels, &counts);
            let d = dsup.concat_batch(&dqry)?.reshape(&[n, CHANNELS, h, w])?;
            (loss, d)
        } else {
            let (a_i, ci) = self.adjusters.image.forward(&i_map, true)?;
            let g = if self.config.levels.uses_global() { Some(gap(&i_map)?) } else { None };
            let a_g = g.as_ref().map(|g| self.adjusters.global.forward(g)).transpose()?;
            let o = if self.needs_crops() {
                let o_map = maps.slice_batch(n, 2 * n);
                Some(self.adjusters.object.forward(&o_map, true)?)
            } else {
                None
            };
            let fused = fuse_batch(&a_i, o.as_ref().map(|x| &x.0), a_g.as_ref())?;
            let d = self.config.fused_dim;
            let sup = fused.slice_batch(0, ns);
            let qry = fused.slice_batch(ns, n);
            let reps = class_means(&sup, &batch.support_labels, c_way)?;
            let (scores, head_cache) = self.head.forward(&pair_rows(&reps, &qry))?;
            let (loss, dscores) =
                episode_loss_grad(&scores.reshape(&[nq, c_way])?, &batch.query_labels, self.config.loss)?;
            let dpairs = self.head.backward(&head_cache, &dscores.reshape(&[nq * c_way, 1])?);
            let (drep, dqry) = pair_rows_backward(&dpairs, c_way, nq, d);
            let dsup = spread_class_grad(&drep, &batch.support_labels, &counts);
            let dfused = dsup.concat_batch(&dqry)?;
            let mut d_i = self.adjusters.image.backward(&ci, &dfused);
            if let Some(g) = &g {
                let dg = self.adjusters.global.backward(g, &dfused);
                d_i.add_assign(&gap_backward(&dg, h, w));
            }
            let dmaps = match &o {
                Some((_, co)) => d_i.concat_batch(&self.adjusters.object.backward(co, &dfused))?,
                None => d_i,
            };
            (loss, dmaps)
        };
        self.encoder.backward(&enc_cache, &dmaps);
        Ok(loss)
    }
}

/// Each support row receives its class gradient divided by the class size.
fn spread_class_grad<T: Real>(dclass: &Tensor<T>, labels: &[usize], counts: &[usize]) -> Tensor<T> {
    let mut shape = dclass.shape().to_vec();
    shape[0] = labels.len();
    let mut out = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        let k = T::of(counts[l] as f64);
        for (o, &g) in out.item_mut(i).iter_mut().zip(dclass.item(l)) {
            *o = g / k;
        }
    }
    out
}

impl<T: Real> Module<T> for MlsmModel<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.adjusters.visit_mut(&join(prefix, "adjust"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.adjusters.visit(&join(prefix, "adjust"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
