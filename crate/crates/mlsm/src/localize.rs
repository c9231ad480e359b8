//! Base-classifier training, object-crop extraction and CAM overlays.

use std::path::{Path, PathBuf};

use mlsm_core::episode::episode_rng;
use mlsm_core::imageops::{crop, resize_bilinear, BoxRegion};
use mlsm_core::localizer::{extract_region, region_box, BaseClassifier, Heatmap};
use mlsm_core::nn::Module;
use mlsm_core::optim::Adam;
use mlsm_core::Tensor;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{self, file_hash, Fingerprint, SaveRequest};
use crate::data::{load_image, planar_to_rgb, rgb_to_planar, write_atomic, DatasetIndex, ImageStore, NormStats, Split};
use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "crops.manifest";

pub struct LocalizerRun {
    pub classifier: BaseClassifier<f32>,
    /// Per-step mean cross-entropy.
    pub losses: Vec<f64>,
    /// Accuracy of the last 10% of steps' batches.
    pub train_acc: f64,
}

/// Cross-entropy training on the base split with Adam; step `s` draws its
/// mini-batch from `episode_rng(seed, s)`.
pub fn train_classifier(
    store: &ImageStore,
    index: &DatasetIndex,
    steps: u64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<LocalizerRun> {
    let base = index.classes_in(Split::Base);
    if base.is_empty() {
        return Err(Error::Missing("the base split has no classes".into()));
    }
    let entries: Vec<usize> = (0..index.entries.len()).filter(|&i| index.split_of_entry(i) == Split::Base).collect();
    let label_of = |e: usize| base.binary_search(&index.entries[e].class_id).expect("base entry");
    let mut classifier = BaseClassifier::<f32>::new(base.len(), &mut episode_rng(seed, u64::MAX));
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(steps as usize);
    let (mut hits, mut seen) = (0usize, 0usize);
    let tail = steps - steps / 10;
    for step in 0..steps {
        let mut rng = episode_rng(seed, step);
        let batch: Vec<usize> = (0..batch_size).map(|_| entries[rng.gen_range(0..entries.len())]).collect();
        let labels: Vec<usize> = batch.iter().map(|&e| label_of(e)).collect();
        classifier.zero_grad();
        let (loss, correct) = classifier.accumulate_gradients(&store.batch(&batch)?, &labels)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(mlsm_core::Error::NonFinite { step, value: loss }.into());
        }
        adam.step(&mut classifier, lr)?;
        losses.push(loss);
        if step >= tail {
            hits += correct;
            seen += batch.len();
        }
    }
    let train_acc = if seen == 0 { 0.0 } else { hits as f64 / seen as f64 };
    Ok(LocalizerRun { classifier, losses, train_acc })
}

/// Base class names in classifier-output order, as stored in the checkpoint.
pub fn base_class_names(index: &DatasetIndex) -> Vec<String> {
    index.classes_in(Split::Base).into_iter().map(|c| index.class_names[c].clone()).collect()
}

pub fn save_classifier(
    path: &Path,
    classifier: &BaseClassifier<f32>,
    image_size: usize,
    norm: NormStats,
    names: &[String],
    steps: u64,
) -> Result<()> {
    let fp = Fingerprint::localizer(image_size, classifier.num_classes());
    checkpoint::save(
        path,
        SaveRequest {
            fingerprint: &fp,
            module: classifier,
            adam: None,
            episode: steps,
            norm,
            extra: serde_json::json!({ "base_classes": names }),
        },
    )
}

/// A trained localizer ready to produce heatmaps.
pub struct Localizer {
    pub classifier: BaseClassifier<f32>,
    pub image_size: usize,
    pub norm: NormStats,
    pub base_classes: Vec<String>,
    /// SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
}

impl Localizer {
    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        if header.fingerprint.kind != "localizer" {
            return Err(Error::Fingerprint { path: path.to_path_buf(), reason: "not a localizer checkpoint".into() });
        }
        let n = header.fingerprint.num_classes;
        let mut classifier = BaseClassifier::<f32>::new(n, &mut episode_rng(0, 0));
        let fp = Fingerprint::localizer(header.fingerprint.image_size, n);
        checkpoint::load(path, &fp, &mut classifier, None)?;
        let base_classes: Vec<String> = serde_json::from_value(header.extra["base_classes"].clone())
            .map_err(|e| crate::error::format_err(path, format!("base_classes: {e}")))?;
        if base_classes.len() != n {
            return Err(crate::error::format_err(path, "base class list does not match the classifier"));
        }
        Ok(Localizer {
            classifier,
            image_size: header.fingerprint.image_size,
            norm: header.norm(),
            base_classes,
            checkpoint_hash: file_hash(path)?,
        })
    }

    /// Heatmap for a `[3, S, S]` image in `[0, 1]`: the true class when the
    /// image belongs to a base class, otherwise the highest-scoring one.
    pub fn heatmap(&self, raw: &Tensor<f32>, class_name: Option<&str>) -> Result<Heatmap<f32>> {
        let mut x = raw.clone();
        self.norm.apply(&mut x);
        let known = class_name.and_then(|n| self.base_classes.iter().position(|b| b == n));
        let c = match known {
            Some(c) => c,
            None => self.classifier.pick_class_for_novel(&x)?,
        };
        Ok(self.classifier.gradcam(&x, c)?)
    }
}

/// Image files under `dir`, as sorted `/`-separated relative paths.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Missing(format!("image directory {} not found", dir.display())));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io { path: dir.to_path_buf(), source: e.into() })?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if entry.file_type().is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            let rel = p.strip_prefix(dir).expect("walk stays under root");
            let parts: Vec<&str> = rel.iter().filter_map(|s| s.to_str()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(out)
}

fn class_dir(rel: &str) -> Option<&str> {
    rel.rsplit_once('/').map(|(d, _)| d.rsplit('/').next().unwrap_or(d))
}

fn manifest_text(hash: &str, threshold: f64, size: usize) -> String {
    format!("checkpoint_sha256\t{hash}\nthreshold\t{threshold:?}\nimage_size\t{size}\n")
}

pub struct LocalizeSummary {
    pub written: usize,
    pub reused: usize,
}

fn png_bytes(img: &image::RgbImage, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(bytes)
}

/// Writes one object crop per image under `out`, mirroring the layout of
/// `images`. Crops are keyed by (checkpoint hash, threshold, size) through a
/// manifest; a cache built with other keys is rebuilt only with `force`.
pub fn localize_dir(
    loc: &Localizer,
    images: &Path,
    out: &Path,
    threshold: f64,
    force: bool,
    overlay: Option<&Path>,
) -> Result<LocalizeSummary> {
    let files = list_images(images)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = manifest_text(&loc.checkpoint_hash, threshold, loc.image_size);
    let manifest_path = out.join(MANIFEST);
    let mut reuse = false;
    if let Ok(existing) = std::fs::read_to_string(&manifest_path) {
        if existing == manifest && !force {
            reuse = true;
        } else if !force {
            return Err(Error::Exists(manifest_path));
        }
    }
    let results: Vec<Result<bool>> = files
        .par_iter()
        .map(|rel| {
            let dst = crate::data::crop_path(out, rel);
            if reuse && dst.is_file() {
                return Ok(false);
            }
            let raw = load_image(&images.join(rel), loc.image_size)?;
            let hm = loc.heatmap(&raw, class_dir(rel))?;
            let cropped = extract_region(&raw, &hm, threshold)?;
            write_atomic(&dst, &png_bytes(&planar_to_rgb(&cropped), &dst)?)?;
            if let Some(dir) = overlay {
                let dst = crate::data::crop_path(dir, rel);
                let full = open_rgb(&images.join(rel))?;
                write_atomic(&dst, &png_bytes(&composite(&full, &hm, threshold)?, &dst)?)?;
            }
            Ok(true)
        })
        .collect();
    let mut summary = LocalizeSummary { written: 0, reused: 0 };
    for r in results {
        if r? {
            summary.written += 1;
        } else {
            summary.reused += 1;
        }
    }
    write_atomic(&manifest_path, manifest.as_bytes())?;
    Ok(summary)
}

fn open_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    Ok(rgb_to_planar(&img))
}

fn jet(v: f32) -> [f32; 3] {
    let ch = |off: f32| (1.5 - (4.0 * v - off).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Side-by-side panel: the image, the heatmap blended over it with the crop
/// box outlined, and the rescaled crop.
pub fn composite(image: &Tensor<f32>, hm: &Heatmap<f32>, threshold: f64) -> Result<image::RgbImage> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (hh, hw) = (hm.values.shape()[0], hm.values.shape()[1]);
    let up = resize_bilinear(&hm.values.clone().reshape(&[1, hh, hw])?, h, w)?;
    let max = up.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let bx = region_box(&hm.values, h, w, threshold)?.unwrap_or(BoxRegion { top: 0, left: 0, bottom: h, right: w });
    let mut blended = image.clone();
    for p in 0..h * w {
        let v = if max > 0.0 { up.data()[p] / max } else { 0.0 };
        let c = jet(v);
        for (k, ck) in c.iter().enumerate() {
            let px = &mut blended.data_mut()[k * h * w + p];
            *px = 0.5 * *px + 0.5 * ck;
        }
    }
    for y in bx.top..bx.bottom {
        for x in bx.left..bx.right {
            let edge = y == bx.top || y + 1 == bx.bottom || x == bx.left || x + 1 == bx.right;
            if edge {
                for k in 0..3 {
                    blended.data_mut()[(k * h + y) * w + x] = if k == 1 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let zoomed = resize_bilinear(&crop(image, bx)?, h, w)?;
    let panels = [image, &blended, &zoomed];
    let mut out = image::RgbImage::new(3 * w as u32, h as u32);
    for (i, panel) in panels.iter().enumerate() {
        let rgb = planar_to_rgb(panel);
        image::imageops::replace(&mut out, &rgb, (i * w) as i64, 0);
    }
    Ok(out)
}

/// One composite per image under `images`, written to `out`.
pub fn overlay_dir(loc: &Localizer, images: &Path, out: &Path, threshold: f64) -> Result<usize> {
    let files = list_images(images)?;
    files
        .par_iter()
        .map(|rel| {
            let raw = load_image(&images.join(rel), loc.image_size)?;
            let hm = loc.heatmap(&raw, class_dir(rel))?;
            let full = open_rgb(&images.join(rel))?;
            let dst: PathBuf = crate::data::crop_path(out, rel);
            write_atomic(&dst, &png_bytes(&composite(&full, &hm, threshold)?, &dst)?)
        })
        .collect::<Result<Vec<()>>>()
        .map(|v| v.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_dir_is_the_parent_directory() {
        assert_eq!(class_dir("class_03/img_001.png"), Some("class_03"));
        assert_eq!(class_dir("a/b/c.png"), Some("b"));
        assert_eq!(class_dir("c.png"), None);
    }

    #[test]
    fn jet_runs_blue_to_red() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn composite_is_three_panels_wide() {
        let img = Tensor::full(&[3, 10, 12], 0.5f32);
        let mut values = Tensor::zeros(&[3, 3]);
        values.data_mut()[0] = 1.0;
        let out = composite(&img, &Heatmap { values, source_class: 0 }, 0.2).unwrap();
        assert_eq!((out.width(), out.height()), (36, 10));
    }
}
