//! Evaluation over cached embeddings, report files and the ablation table.

use std::fmt::Write as _;
use std::path::Path;

use mlsm_core::engine::{evaluate_episodes, EpisodeScorer, EvalProtocol, EvalReport};
use mlsm_core::episode::EpisodePlan;
use mlsm_core::model::Embeddings;
use mlsm_core::relation::class_means;
use mlsm_core::{MlsmModel, Tensor};
use rand::SeedableRng;
use rayon::prelude::*;

use crate::checkpoint::{self, param_hash, Fingerprint, Header};
use crate::data::{write_atomic, DatasetIndex, ImageStore, Split};
use crate::error::{format_err, io_err, Error, Result};

pub const QUERY_INTERPRETATION: &str = "total per episode, split evenly across classes";
const EMBED_CHUNK: usize = 64;

pub struct LoadedModel {
    pub model: MlsmModel<f32>,
    pub header: Header,
}

/// Rebuilds a model from the fingerprint stored in its checkpoint.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let header = checkpoint::read_header(path)?;
    if header.fingerprint.kind != "mlsm" {
        return Err(Error::Fingerprint { path: path.to_path_buf(), reason: "not a model checkpoint".into() });
    }
    let config = header.fingerprint.model_config().map_err(|_| format_err(path, "bad fingerprint"))?;
    let mut model = MlsmModel::new(config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let header = checkpoint::load(path, &Fingerprint::model(&config), &mut model, None)?;
    Ok(LoadedModel { model, header })
}

/// Inference-mode embeddings of every image in `entries`.
pub struct EmbeddingTable {
    row: Vec<Option<usize>>,
    item_shape: Vec<usize>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn build(model: &MlsmModel<f32>, store: &ImageStore, entries: &[usize], n_total: usize) -> Result<Self> {
        let needs_crops = model.config.levels.uses_object();
        let chunks: Vec<Result<Tensor<f32>>> = entries
            .par_chunks(EMBED_CHUNK)
            .map(|ids| {
                let images = store.batch(ids)?;
                let crops = if needs_crops {
                    Some(store.crop_batch(ids)?.ok_or_else(|| Error::Missing("object crops were not loaded".into()))?)
                } else {
                    None
                };
                Ok(model.embed(&images, crops.as_ref())?.0)
            })
            .collect();
        let mut row = vec![None; n_total];
        let mut data = Vec::new();
        let mut item_shape = Vec::new();
        for (k, &e) in entries.iter().enumerate() {
            row[e] = Some(k);
        }
        for c in chunks {
            let t = c?;
            item_shape = t.shape()[1..].to_vec();
            data.extend_from_slice(t.data());
        }
        Ok(EmbeddingTable { row, item_shape, data })
    }

    pub fn gather(&self, entries: &[usize]) -> Result<Tensor<f32>> {
        let len: usize = self.item_shape.iter().product();
        let mut items = Vec::with_capacity(entries.len());
        for &e in entries {
            let r = self
                .row
                .get(e)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Missing(format!("entry {e} was not embedded")))?;
            items.push(&self.data[r * len..(r + 1) * len]);
        }
        Ok(Tensor::stack(&items, &self.item_shape)?)
    }
}

pub struct ModelScorer<'a> {
    pub model: &'a MlsmModel<f32>,
    pub table: &'a EmbeddingTable,
}

impl EpisodeScorer for ModelScorer<'_> {
    fn score(&mut self, plan: &EpisodePlan) -> mlsm_core::Result<Tensor<f64>> {
        let ids = |v: &[(usize, usize)]| v.iter().map(|&(i, _)| i).collect::<Vec<_>>();
        let gather = |v: &[(usize, usize)]| {
            self.table.gather(&ids(v)).map_err(|e| mlsm_core::Error::InvalidArgument(e.to_string()))
        };
        let support = Embeddings(gather(&plan.support)?);
        let query = Embeddings(gather(&plan.query)?);
        let s = self.model.score_embeddings(&support, &plan.support_labels(), &query, plan.c_way)?;
        to_f64(&s)
    }
}

/// Nearest class mean by cosine similarity of the same embeddings; a
/// reference point outside the learned head.
pub struct CosineScorer<'a> {
    pub table: &'a EmbeddingTable,
}

impl EpisodeScorer for CosineScorer<'_> {
    fn score(&mut self, plan: &EpisodePlan) -> mlsm_core::Result<Tensor<f64>> {
        let err = |e: Error| mlsm_core::Error::InvalidArgument(e.to_string());
        let support: Vec<usize> = plan.support.iter().map(|&(i, _)| i).collect();
        let query: Vec<usize> = plan.query.iter().map(|&(i, _)| i).collect();
        let s = to_f64(&self.table.gather(&support).map_err(err)?)?;
        let q = to_f64(&self.table.gather(&query).map_err(err)?)?;
        let d = s.item_len();
        let s = s.reshape(&[support.len(), d])?;
        let q = q.reshape(&[query.len(), d])?;
        let reps = class_means(&s, &plan.support_labels(), plan.c_way)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut out = Tensor::zeros(&[query.len(), plan.c_way]);
        for i in 0..query.len() {
            for c in 0..plan.c_way {
                let (a, b) = (q.item(i), reps.item(c));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                out.item_mut(i)[c] = dot / (norm(a) * norm(b));
            }
        }
        Ok(out)
    }
}

fn to_f64(t: &Tensor<f32>) -> mlsm_core::Result<Tensor<f64>> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v as f64).collect())
}

/// Everything written to an evaluation report file.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFile {
    pub report: EvalReport,
    pub checkpoint: String,
    pub param_hash_before: String,
    pub param_hash_after: String,
    pub cosine_baseline_acc: f64,
}

pub struct EvalInputs<'a> {
    pub model: &'a MlsmModel<f32>,
    pub header: &'a Header,
    pub checkpoint: &'a Path,
    pub store: &'a ImageStore,
    pub index: &'a DatasetIndex,
    pub protocol: EvalProtocol,
}

/// Runs the protocol on the model without touching its parameters; the
/// parameter hash is recorded before and after.
pub fn evaluate(inputs: EvalInputs<'_>) -> Result<ReportFile> {
    let split: Split = inputs.protocol.split.parse()?;
    let before = param_hash(inputs.model);
    let pool = inputs.index.pool(split);
    let entries: Vec<usize> = pool.iter().flatten().copied().collect();
    let table = EmbeddingTable::build(inputs.model, inputs.store, &entries, inputs.index.entries.len())?;
    let acc = evaluate_episodes(&mut ModelScorer { model: inputs.model, table: &table }, &pool, &inputs.protocol)?;
    let cosine = evaluate_episodes(&mut CosineScorer { table: &table }, &pool, &inputs.protocol)?;
    let after = param_hash(inputs.model);
    let report = EvalReport::new(
        inputs.protocol,
        acc,
        inputs.model.config.levels.as_str().to_string(),
        inputs.header.fingerprint.digest(),
    );
    Ok(ReportFile {
        report,
        checkpoint: inputs.checkpoint.display().to_string(),
        param_hash_before: before,
        param_hash_after: after,
        cosine_baseline_acc: cosine.iter().sum::<f64>() / cosine.len().max(1) as f64,
    })
}

impl ReportFile {
    /// Key-value header, a `---` line, then one `episode<TAB>accuracy` line
    /// per episode. Floats are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let r = &self.report;
        let p = &r.protocol;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}\t{v}");
        };
        kv("ablation_mode", &r.levels);
        kv("split", &p.split);
        kv("c_way", &p.c_way);
        kv("k_shot", &p.k_shot);
        kv("n_episodes", &p.n_episodes);
        kv("n_query", &p.n_query);
        kv("query_interpretation", &QUERY_INTERPRETATION);
        kv("seed", &p.seed);
        kv("mean_acc", &format!("{:?}", r.mean_acc));
        kv("ci95", &format!("{:?}", r.ci95));
        kv("fingerprint", &r.fingerprint);
        kv("checkpoint", &self.checkpoint);
        kv("param_hash_before", &self.param_hash_before);
        kv("param_hash_after", &self.param_hash_after);
        kv("external_baseline_cosine_mean_acc", &format!("{:?}", self.cosine_baseline_acc));
        s.push_str("---\n");
        for (e, a) in r.per_episode_acc.iter().enumerate() {
            let _ = writeln!(s, "{e}\t{a:?}");
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |r: String| format_err(path, r);
        let (head, body) = text.split_once("---\n").ok_or_else(|| bad("missing --- separator".into()))?;
        let mut kv = std::collections::HashMap::new();
        for line in head.lines() {
            let (k, v) = line.split_once('\t').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(format!("bad number for {k}")));
        let int = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("bad integer for {k}")));
        let mut acc = Vec::new();
        for (n, line) in body.lines().enumerate() {
            let (e, a) = line.split_once('\t').ok_or_else(|| bad(format!("bad episode line {line:?}")))?;
            if e.parse::<usize>().ok() != Some(n) {
                return Err(bad(format!("episode lines out of order at {n}")));
            }
            acc.push(a.parse::<f64>().map_err(|_| bad(format!("bad accuracy {a:?}")))?);
        }
        let protocol = EvalProtocol {
            split: get("split")?.to_string(),
            n_episodes: int("n_episodes")? as usize,
            c_way: int("c_way")? as usize,
            k_shot: int("k_shot")? as usize,
            n_query: int("n_query")? as usize,
            seed: int("seed")?,
        };
        let report = EvalReport {
            protocol,
            per_episode_acc: acc,
            mean_acc: num("mean_acc")?,
            ci95: num("ci95")?,
            levels: get("ablation_mode")?.to_string(),
            fingerprint: get("fingerprint")?.to_string(),
        };
        Ok(ReportFile {
            report,
            checkpoint: get("checkpoint")?.to_string(),
            param_hash_before: get("param_hash_before")?.to_string(),
            param_hash_after: get("param_hash_after")?.to_string(),
            cosine_baseline_acc: num("external_baseline_cosine_mean_acc")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(path, &text)
    }
}

/// Directory name of an ablation cell, e.g. `IGO-5shot`.
pub fn cell_name(levels: &str, k_shot: usize) -> String {
    format!("{}-{k_shot}shot", levels.replace('+', ""))
}

/// Rows I, I+G, I+G+O by columns 1-shot, 5-shot, as `mean ± ci95` percent.
pub fn render_ablation(cells: &[(String, usize, Option<EvalReport>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8}{:>18}{:>18}", "Level", "1-shot", "5-shot");
    for levels in ["I", "I+G", "I+G+O"] {
        let _ = write!(s, "{levels:<8}");
        for k in [1, 5] {
            let cell = cells.iter().find(|(l, kk, _)| l == levels && *kk == k).and_then(|(_, _, r)| r.as_ref());
            let text = match cell {
                Some(r) => format!("{:.2} ± {:.2}", 100.0 * r.mean_acc, 100.0 * r.ci95),
                None => "-".to_string(),
            };
            let _ = write!(s, "{text:>18}");
        }
        s.push('\n');
    }
    s
}
