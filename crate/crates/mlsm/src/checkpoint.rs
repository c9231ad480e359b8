//! Binary checkpoints: `MLSMCKPT`, a little-endian u64 header length, a JSON
//! header, then every tensor as little-endian f32 in header order.

use std::io::{Read, Write};
use std::path::Path;

use mlsm_core::encoder::Levels;
use mlsm_core::nn::{Module, Slot};
use mlsm_core::optim::Adam;
use mlsm_core::relation::LossKind;
use mlsm_core::{ModelConfig, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{write_atomic, NormStats};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"MLSMCKPT";
const FORMAT: u32 = 1;
pub const POOLING: &str = "maxpool2x2 after conv blocks 1 and 2";
pub const NORMALIZATION: &str = "per-channel mean/std over the base split";

/// Everything that must agree for saved weights to be meaningful.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// `mlsm` or `localizer`.
    pub kind: String,
    pub image_size: usize,
    pub fused_dim: usize,
    pub hidden: usize,
    pub levels: String,
    pub loss: String,
    pub num_classes: usize,
    pub pooling: String,
    pub normalization: String,
}

impl Fingerprint {
    pub fn model(config: &ModelConfig) -> Self {
        Fingerprint {
            kind: "mlsm".into(),
            image_size: config.image_size,
            fused_dim: config.fused_dim,
            hidden: config.hidden,
            levels: config.levels.as_str().into(),
            loss: config.loss.as_str().into(),
            num_classes: 0,
            pooling: POOLING.into(),
            normalization: NORMALIZATION.into(),
        }
    }

    pub fn localizer(image_size: usize, num_classes: usize) -> Self {
        Fingerprint {
            kind: "localizer".into(),
            image_size,
            fused_dim: 0,
            hidden: 0,
            levels: String::new(),
            loss: "cross-entropy".into(),
            num_classes,
            pooling: POOLING.into(),
            normalization: NORMALIZATION.into(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let bad = |what: &str| Error::Format { path: Default::default(), reason: format!("fingerprint {what}") };
        Ok(ModelConfig {
            image_size: self.image_size,
            fused_dim: self.fused_dim,
            hidden: self.hidden,
            levels: Levels::parse(&self.levels).ok_or_else(|| bad("levels"))?,
            loss: LossKind::parse(&self.loss).ok_or_else(|| bad("loss"))?,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("fingerprint serializes")))
    }

    fn mismatch(&self, other: &Fingerprint) -> Option<String> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        let diffs: Vec<String> = a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: saved {v} vs expected {}", b[k]))
            .collect();
        (!diffs.is_empty()).then(|| diffs.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub fingerprint: Fingerprint,
    /// Episodes (or steps) completed.
    pub episode: u64,
    pub adam_t: u64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    /// Parameters and buffers in visit order.
    pub tensors: Vec<TensorMeta>,
    /// Adam first and second moments, one per parameter, if stored.
    pub adam_moments: usize,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Header {
    pub fn norm(&self) -> NormStats {
        NormStats { mean: self.norm_mean, std: self.norm_std }
    }
}

pub struct SaveRequest<'a, M: ?Sized> {
    pub fingerprint: &'a Fingerprint,
    pub module: &'a M,
    pub adam: Option<&'a Adam<f32>>,
    pub episode: u64,
    pub norm: NormStats,
    pub extra: serde_json::Value,
}

fn collect<M: Module<f32> + ?Sized>(module: &M) -> (Vec<TensorMeta>, Vec<Tensor<f32>>) {
    let mut meta = Vec::new();
    let mut data = Vec::new();
    module.visit("", &mut |name, t| {
        meta.push(TensorMeta { name: name.to_string(), shape: t.shape().to_vec() });
        data.push(t.clone());
    });
    (meta, data)
}

pub fn save<M: Module<f32> + ?Sized>(path: &Path, req: SaveRequest<'_, M>) -> Result<()> {
    let (tensors, mut data) = collect(req.module);
    let (adam_t, adam_moments) = match req.adam {
        Some(a) => {
            data.extend(a.m.iter().cloned());
            data.extend(a.v.iter().cloned());
            (a.t, a.m.len())
        }
        None => (0, 0),
    };
    let header = Header {
        format: FORMAT,
        fingerprint: req.fingerprint.clone(),
        episode: req.episode,
        adam_t,
        norm_mean: req.norm.mean,
        norm_std: req.norm.std,
        tensors,
        adam_moments,
        extra: req.extra,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * data.iter().map(|t| t.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in &data {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f =
        std::fs::File::open(path).map_err(|_| Error::Missing(format!("checkpoint {} not found", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_err(path))?;
    Ok(bytes)
}

fn split_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let bad = |r: &str| crate::error::format_err(path, r);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unsupported format {}", header.format)));
    }
    Ok((header, end))
}

pub fn read_header(path: &Path) -> Result<Header> {
    Ok(split_header(path, &read_all(path)?)?.0)
}

/// Loads weights (and optimizer state when `adam` is given) into `module`,
/// refusing on any fingerprint or layout difference.
pub fn load<M: Module<f32> + ?Sized>(
    path: &Path,
    expected: &Fingerprint,
    module: &mut M,
    adam: Option<&mut Adam<f32>>,
) -> Result<Header> {
    let bytes = read_all(path)?;
    let (header, mut at) = split_header(path, &bytes)?;
    if let Some(diff) = header.fingerprint.mismatch(expected) {
        return Err(Error::Fingerprint { path: path.to_path_buf(), reason: diff });
    }
    let (want, _) = collect(module);
    if want != header.tensors {
        return Err(Error::Fingerprint { path: path.to_path_buf(), reason: "tensor layout differs".into() });
    }
    let bad = |r: &str| crate::error::format_err(path, r);
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let end = at.checked_add(4 * n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated data"))?;
        let data = bytes[at..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        at = end;
        Ok(Tensor::from_vec(shape, data)?)
    };
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        loaded.push(take(&meta.shape)?);
    }
    let mut moments = Vec::new();
    if header.adam_moments > 0 {
        let param_shapes: Vec<Vec<usize>> = {
            let mut shapes = Vec::new();
            module.visit_mut("", &mut |_, slot| {
                if let Slot::Param(p) = slot {
                    shapes.push(p.value.shape().to_vec());
                }
            });
            shapes
        };
        if param_shapes.len() != header.adam_moments {
            return Err(bad("optimizer state does not match the parameters"));
        }
        for _ in 0..2 {
            for s in &param_shapes {
                moments.push(take(s)?);
            }
        }
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut it = loaded.into_iter();
    module.visit_mut("", &mut |_, slot| {
        let t = it.next().expect("layout checked");
        match slot {
            Slot::Param(p) => {
                p.value = t;
                p.grad = Tensor::zeros(p.value.shape());
            }
            Slot::Buffer(b) => *b = t,
        }
    });
    if let Some(adam) = adam {
        if header.adam_moments > 0 {
            let v = moments.split_off(header.adam_moments);
            adam.m = moments;
            adam.v = v;
        } else {
            adam.m.clear();
            adam.v.clear();
        }
        adam.t = header.adam_t;
    }
    Ok(header)
}

/// Hex SHA-256 over every parameter and buffer (name, shape, bytes).
pub fn param_hash<M: Module<f32> + ?Sized>(module: &M) -> String {
    let mut h = Sha256::new();
    module.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_all(path)?)))
}

/// Appends to a text file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}
