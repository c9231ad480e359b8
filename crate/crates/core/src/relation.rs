//! Similarity head, K-shot support averaging, pairing and the episode loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, sigmoid, Linear, Module, Slot};
use crate::tensor::{Real, Tensor};

/// Two fully connected layers `in -> hidden -> 1`, ReLU between, sigmoid out.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct HeadCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    scores: Tensor<T>,
}

impl<T: Real> SimilarityHead<T> {
    /// Hidden biases start at one so no hidden unit begins dead.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut fc1 = Linear::new(in_dim, hidden, rng);
        fc1.bias.value.fill(T::one());
        SimilarityHead { fc1, fc2: Linear::new(hidden, 1, rng) }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_features
    }

    /// Scores for `[P, in]` pair rows, returned as `[P, 1]`.
    pub fn forward(&self, pairs: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let hidden = relu(&self.fc1.forward(pairs)?);
        let mut scores = self.fc2.forward(&hidden)?;
        scores.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((scores.clone(), HeadCache { input: pairs.clone(), hidden, scores }))
    }

    /// Takes the gradient w.r.t. the scores, returns the gradient w.r.t. the pair rows.
    pub fn backward(&mut self, cache: &HeadCache<T>, dscores: &Tensor<T>) -> Tensor<T> {
        let mut dlogit = dscores.clone();
        for (d, &s) in dlogit.data_mut().iter_mut().zip(cache.scores.data()) {
            *d *= s * (T::one() - s);
        }
        let dh = self.fc2.backward(&cache.hidden, &dlogit);
        let dh = relu_backward(&cache.hidden, &dh);
        self.fc1.backward(&cache.input, &dh)
    }
}

impl<T: Real> Module<T> for SimilarityHead<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Elementwise mean of the `k` support vectors of one class.
pub fn average_support<T: Real>(vectors: &[&[T]], k: usize) -> Result<Vec<T>> {
    if vectors.is_empty() || k == 0 {
        return Err(Error::Empty("support vectors"));
    }
    if vectors.len() != k {
        return Err(Error::Shape { expected: vec![k], found: vec![vectors.len()] });
    }
    let d = vectors[0].len();
    let mut out = vec![T::zero(); d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::Shape { expected: vec![d], found: vec![v.len()] });
        }
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    if k > 1 {
        let kk = T::of(k as f64);
        out.iter_mut().for_each(|o| *o /= kk);
    }
    Ok(out)
}

/// Per-class mean of `[n, ...]` items grouped by `labels`, returning `[c_way, ...]`.
pub fn class_means<T: Real>(items: &Tensor<T>, labels: &[usize], c_way: usize) -> Result<Tensor<T>> {
    if labels.len() != items.batch() {
        return Err(Error::Shape { expected: vec![items.batch()], found: vec![labels.len()] });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c_way) {
        return Err(Error::LabelOutOfRange { label: l, classes: c_way });
    }
    let mut shape = items.shape().to_vec();
    shape[0] = c_way;
    let mut out = Tensor::zeros(&shape);
    for c in 0..c_way {
        let members: Vec<&[T]> =
            labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| items.item(i)).collect();
        let mean = average_support(&members, members.len())?;
        out.item_mut(c).copy_from_slice(&mean);
    }
    Ok(out)
}

/// Relation score of one (support representation, query representation) pair.
pub fn relation_score<T: Real>(head: &SimilarityHead<T>, rep_a: &[T], rep_b: &[T]) -> Result<T> {
    if rep_a.len() != rep_b.len() || rep_a.len() * 2 != head.in_dim() {
        return Err(Error::Shape { expected: vec![head.in_dim() / 2; 2], found: vec![rep_a.len(), rep_b.len()] });
    }
    let mut row = Vec::with_capacity(head.in_dim());
    row.extend_from_slice(rep_a);
    row.extend_from_slice(rep_b);
    let (s, _) = head.forward(&Tensor::from_vec(&[1, row.len()], row)?)?;
    Ok(s.data()[0])
}

/// Builds every (class, query) pair row `concat(class_rep, query_rep)`,
/// row index `q * c_way + c`.
pub fn pair_rows<T: Real>(class_reps: &Tensor<T>, queries: &Tensor<T>) -> Tensor<T> {
    let (c_way, n) = (class_reps.batch(), queries.batch());
    let (dc, dq) = (class_reps.item_len(), queries.item_len());
    let mut data = Vec::with_capacity(n * c_way * (dc + dq));
    for q in 0..n {
        for c in 0..c_way {
            data.extend_from_slice(class_reps.item(c));
            data.extend_from_slice(queries.item(q));
        }
    }
    Tensor::from_vec(&[n * c_way, dc + dq], data).expect("pair rows")
}

/// Splits pair-row gradients back onto the class representations and queries.
pub fn pair_rows_backward<T: Real>(dpairs: &Tensor<T>, c_way: usize, n: usize, dc: usize) -> (Tensor<T>, Tensor<T>) {
    let dq = dpairs.item_len() - dc;
    let mut dclass = Tensor::zeros(&[c_way, dc]);
    let mut dquery = Tensor::zeros(&[n, dq]);
    for q in 0..n {
        for c in 0..c_way {
            let row = dpairs.item(q * c_way + c);
            for (a, &g) in dclass.item_mut(c).iter_mut().zip(&row[..dc]) {
                *a += g;
            }
            for (a, &g) in dquery.item_mut(q).iter_mut().zip(&row[dc..]) {
                *a += g;
            }
        }
    }
    (dclass, dquery)
}

/// Depth concatenation of two `[C, H, W]` maps into `[2C, H, W]`, first argument first.
pub fn image_level_pair_concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::Shape { expected: a.shape().to_vec(), found: b.shape().to_vec() });
    }
    let mut shape = a.shape().to_vec();
    shape[0] *= 2;
    let mut data = Vec::with_capacity(a.len() * 2);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

/// Batched map pairs `[n * c_way, 2C, H, W]`, row `q * c_way + c` = concat(class c, query q).
pub fn map_pairs<T: Real>(class_maps: &Tensor<T>, query_maps: &Tensor<T>) -> Tensor<T> {
    let (c_way, n) = (class_maps.batch(), query_maps.batch());
    let rows = pair_rows(class_maps, query_maps);
    let s = class_maps.shape();
    rows.reshape(&[n * c_way, 2 * s[1], s[2], s[3]]).expect("map pairs")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    #[default]
    Mse,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Bce => "bce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "bce" => Some(LossKind::Bce),
            _ => None,
        }
    }
}

/// Episode loss against one-hot targets over all `n_query * c_way` entries,
/// with its gradient w.r.t. the scores.
pub fn episode_loss_grad<T: Real>(scores: &Tensor<T>, labels: &[usize], kind: LossKind) -> Result<(T, Tensor<T>)> {
    scores.expect_shape(&[labels.len(), usize::MAX])?;
    let c_way = scores.shape()[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= c_way) {
        return Err(Error::LabelOutOfRange { label: l, classes: c_way });
    }
    let count = T::of((labels.len() * c_way).max(1) as f64);
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = T::zero();
    let tiny = T::of(1e-7);
    for (q, &label) in labels.iter().enumerate() {
        for c in 0..c_way {
            let s = scores.item(q)[c];
            let target = if c == label { T::one() } else { T::zero() };
            let (l, g) = match kind {
                LossKind::Mse => ((s - target) * (s - target), T::of(2.0) * (s - target)),
                LossKind::Bce => {
                    let p = s.max(tiny).min(T::one() - tiny);
                    let l = -(target * p.ln() + (T::one() - target) * (T::one() - p).ln());
                    (l, (p - target) / (p * (T::one() - p)))
                }
            };
            total += l;
            grad.item_mut(q)[c] = g / count;
        }
    }
    Ok((total / count, grad))
}

pub fn episode_loss<T: Real>(scores: &Tensor<T>, labels: &[usize], kind: LossKind) -> Result<T> {
    episode_loss_grad(scores, labels, kind).map(|(l, _)| l)
}

/// Row-wise argmax, ties to the lowest index.
pub fn predict<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    (0..scores.batch())
        .map(|q| {
            let row = scores.item(q);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
