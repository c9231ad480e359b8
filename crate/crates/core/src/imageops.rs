//! Planar image helpers: bilinear resampling, cropping and mask components.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bilinear resize of a `[C, H, W]` tensor with half-pixel centres
/// (`align_corners = false`), clamping at the borders.
pub fn resize_bilinear<T: Real>(src: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    src.expect_shape(&[usize::MAX, usize::MAX, usize::MAX])?;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Empty("zero-area image"));
    }
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, T) {
        let pos: f64 = num_traits::Float::max((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5, 0.0);
        let i0 = (num_traits::Float::floor(pos) as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, T::of(pos - i0 as f64))
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxRegion {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoxRegion {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Pixels of the largest 4-connected component of `mask`; ties go to the
/// component reached first in raster order.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

pub fn bounding_box(pixels: &[usize], w: usize) -> Option<BoxRegion> {
    let first = *pixels.first()?;
    let mut b = BoxRegion { top: first / w, left: first % w, bottom: first / w + 1, right: first % w + 1 };
    for &p in pixels {
        let (y, x) = (p / w, p % w);
        b.top = b.top.min(y);
        b.left = b.left.min(x);
        b.bottom = b.bottom.max(y + 1);
        b.right = b.right.max(x + 1);
    }
    Some(b)
}

/// Copies `region` out of a `[C, H, W]` tensor.
pub fn crop<T: Real>(src: &Tensor<T>, region: BoxRegion) -> Result<Tensor<T>> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if region.bottom > h || region.right > w || region.height() == 0 || region.width() == 0 {
        return Err(crate::error::invalid("crop region outside the image"));
    }
    let mut data = Vec::with_capacity(c * region.height() * region.width());
    for ch in 0..c {
        for y in region.top..region.bottom {
            let row = &src.data()[(ch * h + y) * w..(ch * h + y) * w + w];
            data.extend_from_slice(&row[region.left..region.right]);
        }
    }
    Tensor::from_vec(&[c, region.height(), region.width()], data)
}
