//! Dataset index, class splits, image decoding and normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mlsm_core::imageops::resize_bilinear;
use mlsm_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{format_err, io_err, Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
pub const CLASSES_FILE: &str = "classes.tsv";
pub const NORM_FILE: &str = "norm.tsv";

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "train" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" | "test" => Ok(Split::Novel),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected base, val or novel"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<Entry>,
    /// Class directory names; `class_id` indexes this list.
    pub class_names: Vec<String>,
    pub split_assignment: Vec<Split>,
}

/// Split sizes for `n` classes: 100/50/50 of 200, otherwise 50%/25%/25%
/// rounded down for base and val with the remainder going to novel.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let base = n / 2;
    let val = n / 4;
    (base, val, n - base - val)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    out.sort();
    Ok(out)
}

/// Scans `root/<class_name>/<image_file>` and assigns classes to splits.
///
/// Classes are sorted by name, shuffled with `split_seed`, then cut into
/// base, val and novel in that order.
pub fn build_index(root: &Path, split_seed: u64) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Missing(format!("dataset root {} is not a readable directory", root.display())));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name =
            dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| format_err(&dir, "class name is not UTF-8"))?;
        let class_id = class_names.len();
        let before = entries.len();
        for file in sorted_dir(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            let fname =
                file.file_name().and_then(|n| n.to_str()).ok_or_else(|| format_err(&file, "file name is not UTF-8"))?;
            entries.push(Entry { path: format!("{name}/{fname}"), class_id });
        }
        if entries.len() == before {
            return Err(format_err(&dir, "class directory holds no images"));
        }
        class_names.push(name.to_string());
    }
    if class_names.is_empty() {
        return Err(format_err(root, "no class directories"));
    }
    let mut order: Vec<usize> = (0..class_names.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let (base, val, _) = split_sizes(order.len());
    let mut split_assignment = vec![Split::Novel; order.len()];
    for (rank, &c) in order.iter().enumerate() {
        split_assignment[c] = if rank < base {
            Split::Base
        } else if rank < base + val {
            Split::Val
        } else {
            Split::Novel
        };
    }
    Ok(DatasetIndex { entries, class_names, split_assignment })
}

impl DatasetIndex {
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.class_names.len()).filter(|&c| self.split_assignment[c] == split).collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = |s| self.split_assignment.iter().filter(|&&x| x == s).count();
        (n(Split::Base), n(Split::Val), n(Split::Novel))
    }

    pub fn split_of_entry(&self, entry: usize) -> Split {
        self.split_assignment[self.entries[entry].class_id]
    }

    /// Entry ids per class of `split`, classes in ascending id order.
    pub fn pool(&self, split: Split) -> Vec<Vec<usize>> {
        let classes = self.classes_in(split);
        let mut by_class: BTreeMap<usize, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(v) = by_class.get_mut(&e.class_id) {
                v.push(i);
            }
        }
        by_class.into_values().collect()
    }

    pub fn summary(&self) -> String {
        let (b, v, n) = self.split_counts();
        format!("base={b} val={v} novel={n}")
    }

    /// Writes `index.tsv` (`relative_path<TAB>class_id<TAB>split`) and
    /// `classes.tsv` (`class_id<TAB>name<TAB>split`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut index = String::new();
        for e in &self.entries {
            index.push_str(&format!("{}\t{}\t{}\n", e.path, e.class_id, self.split_assignment[e.class_id]));
        }
        let mut classes = String::new();
        for (c, name) in self.class_names.iter().enumerate() {
            classes.push_str(&format!("{c}\t{name}\t{}\n", self.split_assignment[c]));
        }
        write_atomic(&dir.join(INDEX_FILE), index.as_bytes())?;
        write_atomic(&dir.join(CLASSES_FILE), classes.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let classes_path = dir.join(CLASSES_FILE);
        let index_path = dir.join(INDEX_FILE);
        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map_err(|_| Error::Missing(format!("{} not found; run `mlsm prepare` first", p.display())))
        };
        let mut class_names = Vec::new();
        let mut split_assignment = Vec::new();
        for (n, line) in read(&classes_path)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(n) {
                return Err(format_err(&classes_path, format!("line {}", n + 1)));
            }
            class_names.push(f[1].to_string());
            split_assignment
                .push(f[2].parse::<Split>().map_err(|_| format_err(&classes_path, format!("line {}", n + 1)))?);
        }
        let mut entries = Vec::new();
        for (n, line) in read(&index_path)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || format_err(&index_path, format!("line {}", n + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let class_id: usize = f[1].parse().map_err(|_| bad())?;
            if class_id >= class_names.len() || f[2] != split_assignment[class_id].as_str() {
                return Err(bad());
            }
            entries.push(Entry { path: f[0].to_string(), class_id });
        }
        Ok(DatasetIndex { entries, class_names, split_assignment })
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Decodes an image to planar RGB in `[0, 1]`, bilinearly resized to
/// `size x size`. No augmentation.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero-area image"));
    }
    let planar = rgb_to_planar(&img);
    if h == size && w == size {
        return Ok(planar);
    }
    Ok(resize_bilinear(&planar, size, size)?)
}

pub fn rgb_to_planar(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// Planar `[3, H, W]` in `[0, 1]` back to 8-bit RGB.
pub fn planar_to_rgb(t: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Per-channel pixel statistics of the base split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: [0.0; 3], std: [1.0; 3] };

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            let hw = img.len() / 3;
            for c in 0..3 {
                for &v in &img.data()[c * hw..(c + 1) * hw] {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            n += hw;
        }
        let n = n.max(1) as f64;
        let mut out = NormStats::IDENTITY;
        for c in 0..3 {
            out.mean[c] = sum[c] / n;
            out.std[c] = (sq[c] / n - out.mean[c] * out.mean[c]).max(0.0).sqrt().max(1e-3);
        }
        out
    }

    pub fn apply(&self, img: &mut Tensor<f32>) {
        let hw = img.len() / 3;
        for c in 0..3 {
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            img.data_mut()[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// `channel<TAB>mean<TAB>std` lines; floats round-trip exactly.
    pub fn to_text(&self) -> String {
        (0..3).map(|c| format!("{c}\t{:?}\t{:?}\n", self.mean[c], self.std[c])).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(NORM_FILE), self.to_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(NORM_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::Missing(format!("{} not found; run `mlsm prepare` first", path.display())))?;
        let mut out = NormStats::IDENTITY;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != 3 {
            return Err(format_err(&path, "expected three channel lines"));
        }
        for (c, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 3 && f[0] == c.to_string())
                .then(|| Some((f[1].parse::<f64>().ok()?, f[2].parse::<f64>().ok()?)))
                .flatten();
            let (m, s) = parsed.ok_or_else(|| format_err(&path, format!("line {}", c + 1)))?;
            out.mean[c] = m;
            out.std[c] = s;
        }
        Ok(out)
    }
}

/// Loads the listed entries in parallel (order preserved).
pub fn load_entries(root: &Path, index: &DatasetIndex, ids: &[usize], size: usize) -> Result<Vec<Tensor<f32>>> {
    ids.par_iter().map(|&i| load_image(&root.join(&index.entries[i].path), size)).collect()
}

/// Base-split statistics at `size`.
pub fn compute_norm(root: &Path, index: &DatasetIndex, size: usize) -> Result<NormStats> {
    let ids: Vec<usize> = (0..index.entries.len()).filter(|&i| index.split_of_entry(i) == Split::Base).collect();
    let images = load_entries(root, index, &ids, size)?;
    Ok(NormStats::from_images(&images))
}

/// Normalized images (and optional crops) for a subset of the index, keyed
/// by entry id.
pub struct ImageStore {
    slot: Vec<Option<usize>>,
    pub images: Vec<Tensor<f32>>,
    pub crops: Option<Vec<Tensor<f32>>>,
    pub size: usize,
}

/// Where the object crop of an entry lives inside a crop cache.
pub fn crop_path(crops_dir: &Path, entry_path: &str) -> PathBuf {
    crops_dir.join(Path::new(entry_path).with_extension("png"))
}

impl ImageStore {
    /// `crops` is `(cache dir, strict)`; in lenient mode a missing crop is
    /// replaced by the full image.
    pub fn load(
        root: &Path,
        index: &DatasetIndex,
        splits: &[Split],
        size: usize,
        norm: &NormStats,
        crops: Option<(&Path, bool)>,
    ) -> Result<Self> {
        let ids: Vec<usize> = (0..index.entries.len()).filter(|&i| splits.contains(&index.split_of_entry(i))).collect();
        let mut slot = vec![None; index.entries.len()];
        for (k, &i) in ids.iter().enumerate() {
            slot[i] = Some(k);
        }
        let mut images = load_entries(root, index, &ids, size)?;
        let crops = match crops {
            None => None,
            Some((dir, strict)) => {
                let loaded: Result<Vec<Tensor<f32>>> = ids
                    .par_iter()
                    .zip(images.par_iter())
                    .map(|(&i, img)| {
                        let p = crop_path(dir, &index.entries[i].path);
                        if p.is_file() {
                            load_image(&p, size)
                        } else if strict {
                            Err(Error::Missing(format!(
                                "object crop {} is missing; run `mlsm localize` or set data.strict_crops = false",
                                p.display()
                            )))
                        } else {
                            Ok(img.clone())
                        }
                    })
                    .collect();
                let mut loaded = loaded?;
                loaded.iter_mut().for_each(|c| norm.apply(c));
                Some(loaded)
            }
        };
        images.iter_mut().for_each(|c| norm.apply(c));
        Ok(ImageStore { slot, images, crops, size })
    }

    pub fn contains(&self, entry: usize) -> bool {
        self.slot.get(entry).is_some_and(|s| s.is_some())
    }

    fn position(&self, entry: usize) -> usize {
        self.slot[entry].unwrap_or_else(|| panic!("entry {entry} is not loaded in this store"))
    }

    pub fn image(&self, entry: usize) -> &Tensor<f32> {
        &self.images[self.position(entry)]
    }

    pub fn crop(&self, entry: usize) -> Option<&Tensor<f32>> {
        let p = self.position(entry);
        self.crops.as_ref().map(|c| &c[p])
    }

    /// `[n, 3, S, S]` batch of the given entries' images.
    pub fn batch(&self, entries: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&[f32]> = entries.iter().map(|&e| self.image(e).data()).collect();
        Ok(Tensor::stack(&items, &[3, self.size, self.size])?)
    }

    pub fn crop_batch(&self, entries: &[usize]) -> Result<Option<Tensor<f32>>> {
        if self.crops.is_none() {
            return Ok(None);
        }
        let items: Vec<&[f32]> = entries.iter().map(|&e| self.crop(e).expect("crops loaded").data()).collect();
        Ok(Some(Tensor::stack(&items, &[3, self.size, self.size])?))
    }
}
