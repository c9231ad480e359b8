//! Synthetic, trivially separable image set: each class is one solid colour
//! and one centred shape on a noisy background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    HBar,
    VBar,
    Frame,
    Ellipse,
}

const SHAPES: [Shape; 10] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Diamond,
    Shape::Ring,
    Shape::HBar,
    Shape::VBar,
    Shape::Frame,
    Shape::Ellipse,
];

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec { classes: 20, per_class: 60, size: 48, seed: 0 }
    }
}

/// Fully saturated colour for class `c` of `n`, hues spread evenly with
/// alternating brightness so neighbours stay distinct.
pub fn class_color(c: usize, n: usize) -> [u8; 3] {
    let h = c as f64 / n.max(1) as f64 * 6.0;
    let v = if c.is_multiple_of(2) { 1.0 } else { 0.6 };
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * v * 255.0) as u8, (g * v * 255.0) as u8, (b * v * 255.0) as u8]
}

pub fn class_shape(c: usize) -> Shape {
    SHAPES[c % SHAPES.len()]
}

/// Whether `(dx, dy)`, measured from the shape centre in units of its
/// radius, lies inside `shape`.
fn inside(shape: Shape, dx: f64, dy: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        Shape::Disc => dx * dx + dy * dy <= 1.0,
        Shape::Square => ax <= 0.8 && ay <= 0.8,
        Shape::Triangle => (-0.9..=0.8).contains(&dy) && ax <= (dy + 0.9) * 0.55,
        Shape::Cross => (ax <= 0.4 && ay <= 1.0) || (ay <= 0.4 && ax <= 1.0),
        Shape::Diamond => ax + ay <= 1.0,
        Shape::Ring => (0.45..=1.0).contains(&(dx * dx + dy * dy).sqrt()),
        Shape::HBar => ax <= 1.0 && ay <= 0.5,
        Shape::VBar => ax <= 0.5 && ay <= 1.0,
        Shape::Frame => ax.max(ay) <= 0.95 && ax.max(ay) >= 0.5,
        Shape::Ellipse => dx * dx / 1.0 + dy * dy / 0.36 <= 1.0,
    }
}

pub fn render(c: usize, n_classes: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let color = class_color(c, n_classes);
    let shape = class_shape(c);
    let s = size as f64;
    let radius = s * rng.gen_range(0.30..0.36);
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
        *px = if inside(shape, dx, dy) {
            let mut j = |v: u8| (v as i32 + rng.gen_range(-12..=12)).clamp(0, 255) as u8;
            Rgb([j(color[0]), j(color[1]), j(color[2])])
        } else {
            let g = rng.gen_range(40..90u8);
            Rgb([g, g, g])
        };
    }
    img
}

/// Writes `root/class_XX/img_YYY.png`. Existing files are left alone unless
/// `overwrite` is set.
pub fn generate(root: &Path, spec: &ToySpec, overwrite: bool) -> Result<()> {
    if spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::Config("toy set needs at least one class and one image".into()));
    }
    for c in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        for i in 0..spec.per_class {
            let img = render(c, spec.classes, spec.size, &mut rng);
            let path = root.join(format!("class_{c:02}")).join(format!("img_{i:03}.png"));
            if path.exists() && !overwrite {
                continue;
            }
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            write_atomic(&path, &bytes)?;
        }
    }
    Ok(())
}
