//! Feature extractor, global average pooling, per-level adjusters and fusion.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BlockCache, ConvBlock, Linear, Module, Slot};
use crate::tensor::{Real, Tensor};

/// Filters per convolution in every block.
pub const CHANNELS: usize = 64;

/// Which representation levels contribute to the fused vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Levels {
    /// Image level only.
    I,
    /// Image + global level.
    IG,
    /// Image + global + object level.
    IGO,
}

impl Levels {
    pub fn uses_global(self) -> bool {
        !matches!(self, Levels::I)
    }

    pub fn uses_object(self) -> bool {
        matches!(self, Levels::IGO)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Levels::I => "I",
            Levels::IG => "I+G",
            Levels::IGO => "I+G+O",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "I" => Some(Levels::I),
            "I+G" | "IG" => Some(Levels::IG),
            "I+G+O" | "IGO" => Some(Levels::IGO),
            _ => None,
        }
    }
}

/// Four convolutional blocks; 2x2 max pooling after the first two, so an
/// `s x s` input maps to `64 x s/4 x s/4` (84 -> 42 -> 21).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock<T>>,
}

pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let blocks = alloc::vec![
            ConvBlock::new(in_channels, CHANNELS, true, rng),
            ConvBlock::new(CHANNELS, CHANNELS, true, rng),
            ConvBlock::new(CHANNELS, CHANNELS, false, rng),
            ConvBlock::new(CHANNELS, CHANNELS, false, rng),
        ];
        Encoder { in_channels, blocks }
    }

    /// Spatial side of the output map for an `image_size` input.
    pub fn map_size(&self, image_size: usize) -> usize {
        self.blocks.iter().fold(image_size, |s, b| b.out_size(s))
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_shape(&[usize::MAX, self.in_channels, usize::MAX, usize::MAX])?;
        if self.map_size(x.shape()[2]) == 0 || self.map_size(x.shape()[3]) == 0 {
            return Err(Error::Shape { expected: alloc::vec![4, 4], found: x.shape()[2..].to_vec() });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, EncoderCache<T>)> {
        self.check(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, train)?;
            caches.push(c);
            h = y;
        }
        Ok((h, EncoderCache { blocks: caches }))
    }

    /// Inference-mode pass (running batch-norm statistics, no cache).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, cache: &EncoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        d
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("block{i}")), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("block{i}")), f);
        }
    }
}

/// Global average pooling: `[N, C, H, W] -> [N, C]`.
pub fn gap<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_shape(&[usize::MAX, usize::MAX, usize::MAX, usize::MAX])?;
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if hw == 0 {
        return Err(Error::Empty("feature map has no spatial positions"));
    }
    let z = T::of(hw as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for b in 0..n {
        let src = x.item(b);
        for (ch, o) in out.item_mut(b).iter_mut().enumerate() {
            *o = src[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / z;
        }
    }
    Ok(out)
}

pub fn gap_backward<T: Real>(dg: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c) = (dg.shape()[0], dg.shape()[1]);
    let hw = h * w;
    let z = T::of(hw as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        let g = dg.item(b);
        let d = dx.item_mut(b);
        for ch in 0..c {
            d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g[ch] / z);
        }
    }
    dx
}

/// Two pooled conv blocks and a fully connected layer to `out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapAdjuster<T> {
    pub in_channels: usize,
    pub map_size: usize,
    pub blocks: [ConvBlock<T>; 2],
    pub fc: Linear<T>,
}

pub struct MapAdjusterCache<T> {
    blocks: [BlockCache<T>; 2],
    flat: Tensor<T>,
    pooled_shape: Vec<usize>,
}

impl<T: Real> MapAdjuster<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, map_size: usize, out_dim: usize, rng: &mut R) -> Self {
        let b0 = ConvBlock::new(in_channels, CHANNELS, map_size >= 2, rng);
        let s1 = b0.out_size(map_size);
        let b1 = ConvBlock::new(CHANNELS, CHANNELS, s1 >= 2, rng);
        let s2 = b1.out_size(s1);
        let fc = Linear::new(CHANNELS * s2 * s2, out_dim, rng);
        MapAdjuster { in_channels, map_size, blocks: [b0, b1], fc }
    }

    pub fn out_dim(&self) -> usize {
        self.fc.out_features
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_shape(&[usize::MAX, self.in_channels, self.map_size, self.map_size])
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, MapAdjusterCache<T>)> {
        self.check(x)?;
        let (h0, c0) = self.blocks[0].forward(x, train)?;
        let (h1, c1) = self.blocks[1].forward(&h0, train)?;
        let pooled_shape = h1.shape().to_vec();
        let (n, per) = (h1.batch(), h1.item_len());
        let flat = h1.reshape(&[n, per])?;
        let y = self.fc.forward(&flat)?;
        Ok((y, MapAdjusterCache { blocks: [c0, c1], flat, pooled_shape }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = self.blocks[1].infer(&self.blocks[0].infer(x)?)?;
        let n = h.batch();
        let per = h.item_len();
        self.fc.forward(&h.reshape(&[n, per])?)
    }

    pub fn backward(&mut self, cache: &MapAdjusterCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.fc.backward(&cache.flat, dy);
        let d = d.reshape(&cache.pooled_shape).expect("pooled shape");
        let d = self.blocks[1].backward(&cache.blocks[1], &d);
        self.blocks[0].backward(&cache.blocks[0], &d)
    }
}

impl<T: Real> Module<T> for MapAdjuster<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.blocks[0].visit_mut(&join(prefix, "block0"), f);
        self.blocks[1].visit_mut(&join(prefix, "block1"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.blocks[0].visit(&join(prefix, "block0"), f);
        self.blocks[1].visit(&join(prefix, "block1"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
}

/// Representation level an adjuster serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Image,
    Object,
    Global,
}

/// Input handed to [`Adjusters::adjust`].
pub enum LevelInput<'a, T> {
    Map(&'a Tensor<T>),
    Vector(&'a Tensor<T>),
}

/// Three independent adjusters, one per level, all producing `D`-vectors.
/// The global adjuster is the fully connected layer alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjusters<T> {
    pub image: MapAdjuster<T>,
    pub object: MapAdjuster<T>,
    pub global: Linear<T>,
}

impl<T: Real> Adjusters<T> {
    pub fn new<R: Rng + ?Sized>(map_size: usize, out_dim: usize, rng: &mut R) -> Self {
        Adjusters {
            image: MapAdjuster::new(CHANNELS, map_size, out_dim, rng),
            object: MapAdjuster::new(CHANNELS, map_size, out_dim, rng),
            global: Linear::new(CHANNELS, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.global.out_features
    }

    /// Inference-mode adjustment of one level to `[N, D]`.
    pub fn adjust(&self, level: Level, input: LevelInput<'_, T>) -> Result<Tensor<T>> {
        match (level, input) {
            (Level::Image, LevelInput::Map(x)) => self.image.infer(x),
            (Level::Object, LevelInput::Map(x)) => self.object.infer(x),
            (Level::Global, LevelInput::Vector(x)) => self.global.forward(x),
            (level, _) => Err(crate::error::invalid(alloc::format!("input kind does not match the {level:?} level"))),
        }
    }
}

impl<T: Real> Module<T> for Adjusters<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.image.visit_mut(&join(prefix, "image"), f);
        self.object.visit_mut(&join(prefix, "object"), f);
        self.global.visit_mut(&join(prefix, "global"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.image.visit(&join(prefix, "image"), f);
        self.object.visit(&join(prefix, "object"), f);
        self.global.visit(&join(prefix, "global"), f);
    }
}

/// Element-sum of the three level vectors, summed as `i + o + g`.
pub fn fuse<T: Real>(i: &[T], o: &[T], g: &[T]) -> Result<Vec<T>> {
    if i.len() != o.len() || i.len() != g.len() {
        return Err(Error::Shape {
            expected: alloc::vec![i.len(), i.len(), i.len()],
            found: alloc::vec![i.len(), o.len(), g.len()],
        });
    }
    Ok(i.iter().zip(o).zip(g).map(|((&a, &b), &c)| a + b + c).collect())
}

/// Batched [`fuse`]; absent levels contribute nothing.
pub fn fuse_batch<T: Real>(i: &Tensor<T>, o: Option<&Tensor<T>>, g: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut out = i.clone();
    for part in [o, g].into_iter().flatten() {
        if part.shape() != i.shape() {
            return Err(Error::Shape { expected: i.shape().to_vec(), found: part.shape().to_vec() });
        }
    }
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let ov = o.map_or(T::zero(), |t| t.data()[k]);
        let gv = g.map_or(T::zero(), |t| t.data()[k]);
        *v = *v + ov + gv;
    }
    Ok(out)
}

/// Inference-mode fused vectors for a batch of images and their object crops.
///
/// `I = encode(image)`, `O = encode(crop)` with the same extractor,
/// `G = gap(I)`; the output is `adjust(I) + adjust(O) + adjust(G)` restricted
/// to `levels`. `crops` may be `None` unless `levels` uses the object level.
pub fn encode_all_levels<T: Real>(
    encoder: &Encoder<T>,
    adjusters: &Adjusters<T>,
    images: &Tensor<T>,
    crops: Option<&Tensor<T>>,
    levels: Levels,
) -> Result<Tensor<T>> {
    let i_map = encoder.encode(images)?;
    let i_vec = adjusters.adjust(Level::Image, LevelInput::Map(&i_map))?;
    let g_vec = if levels.uses_global() {
        Some(adjusters.adjust(Level::Global, LevelInput::Vector(&gap(&i_map)?))?)
    } else {
        None
    };
    let o_vec = if levels.uses_object() {
        let crops = crops.ok_or(Error::Empty("object crops required for the object level"))?;
        if crops.shape() != images.shape() {
            return Err(Error::Shape { expected: images.shape().to_vec(), found: crops.shape().to_vec() });
        }
        let o_map = encoder.encode(crops)?;
        Some(adjusters.adjust(Level::Object, LevelInput::Map(&o_map))?)
    } else {
        None
    };
    fuse_batch(&i_vec, o_vec.as_ref(), g_vec.as_ref())
}
