//! Episodic training loop with validation, checkpointing and resume.

use std::path::{Path, PathBuf};

use log::info;
use mlsm_core::engine::{train_step, EvalProtocol, TrainConfig};
use mlsm_core::episode::{episode_rng, sample_episode, EpisodePlan};
use mlsm_core::optim::Adam;
use mlsm_core::{EpisodeBatch, MlsmModel, ModelConfig};
use serde_json::json;

use crate::checkpoint::{self, append_line, Fingerprint, SaveRequest};
use crate::data::{write_atomic, DatasetIndex, ImageStore, NormStats, Split};
use crate::error::{io_err, Error, Result};
use crate::eval::{EmbeddingTable, ModelScorer};

pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";
pub const LOSS_TRACE: &str = "loss_trace.tsv";
pub const VAL_TRACE: &str = "val_trace.tsv";

/// Stream id reserved for parameter initialization; episodes use `0..`.
const INIT_STREAM: u64 = u64::MAX;
/// Validation episodes are drawn from a seed distinct from training.
const VAL_SEED_OFFSET: u64 = 0x5EED_0001;

pub struct TrainInputs<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub index: &'a DatasetIndex,
    /// Must hold the base split, and the val split when validating.
    pub store: &'a ImageStore,
    pub norm: NormStats,
    pub run_dir: &'a Path,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub episodes: u64,
    pub last_loss: Option<f64>,
    pub best_val: Option<(u64, f64)>,
    pub last: PathBuf,
    pub best: PathBuf,
}

/// Gathers an episode plan into tensors.
pub fn episode_batch(store: &ImageStore, plan: &EpisodePlan) -> Result<EpisodeBatch<f32>> {
    let s: Vec<usize> = plan.support.iter().map(|&(i, _)| i).collect();
    let q: Vec<usize> = plan.query.iter().map(|&(i, _)| i).collect();
    Ok(EpisodeBatch {
        c_way: plan.c_way,
        support: store.batch(&s)?,
        support_crops: store.crop_batch(&s)?,
        support_labels: plan.support_labels(),
        query: store.batch(&q)?,
        query_crops: store.crop_batch(&q)?,
        query_labels: plan.query_labels(),
    })
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<MlsmModel<f32>> {
    Ok(MlsmModel::new(config.clone(), &mut episode_rng(seed, INIT_STREAM))?)
}

/// Mean validation accuracy over `cfg.val_episodes` episodes.
pub fn validate(model: &MlsmModel<f32>, cfg: &TrainConfig, index: &DatasetIndex, store: &ImageStore) -> Result<f64> {
    let pool = index.pool(Split::Val);
    let entries: Vec<usize> = pool.iter().flatten().copied().collect();
    let table = EmbeddingTable::build(model, store, &entries, index.entries.len())?;
    let protocol = EvalProtocol {
        split: Split::Val.to_string(),
        n_episodes: cfg.val_episodes,
        c_way: cfg.c_way,
        k_shot: cfg.k_shot,
        n_query: cfg.n_query_val,
        seed: cfg.seed.wrapping_add(VAL_SEED_OFFSET),
    };
    let acc = mlsm_core::engine::evaluate_episodes(&mut ModelScorer { model, table: &table }, &pool, &protocol)?;
    Ok(acc.iter().sum::<f64>() / acc.len().max(1) as f64)
}

struct State {
    model: MlsmModel<f32>,
    adam: Adam<f32>,
    start: u64,
    best: Option<(u64, f64)>,
}

fn best_from(extra: &serde_json::Value) -> Option<(u64, f64)> {
    Some((extra.get("best_episode")?.as_u64()?, extra.get("best_val_acc")?.as_f64()?))
}

/// Keeps only trace lines whose leading episode number is below `end`.
fn truncate_trace(path: &Path, end: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|e| e.parse::<u64>().ok()).is_some_and(|e| e < end))
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, kept.as_bytes())
}

/// Trains for `train.max_episodes` episodes. Episode `e` is sampled from
/// `episode_rng(seed, e)`, so a resumed run replays exactly the episodes an
/// uninterrupted run would have seen.
pub fn train(inputs: TrainInputs<'_>) -> Result<TrainOutcome> {
    let TrainInputs { model: model_cfg, train: cfg, index, store, norm, run_dir, resume } = inputs;
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let fingerprint = Fingerprint::model(&model_cfg);
    let (last, best, trace, val_trace) =
        (run_dir.join(LAST), run_dir.join(BEST), run_dir.join(LOSS_TRACE), run_dir.join(VAL_TRACE));

    let fresh = !(resume && last.exists());
    let mut st = if !fresh {
        let mut model = init_model(&model_cfg, cfg.seed)?;
        let mut adam = Adam::default();
        let header = checkpoint::load(&last, &fingerprint, &mut model, Some(&mut adam))?;
        info!("resuming from {} at episode {}", last.display(), header.episode);
        State { model, adam, start: header.episode, best: best_from(&header.extra) }
    } else {
        for p in [&trace, &val_trace] {
            write_atomic(p, b"")?;
        }
        State { model: init_model(&model_cfg, cfg.seed)?, adam: Adam::default(), start: 0, best: None }
    };
    truncate_trace(&trace, st.start)?;
    truncate_trace(&val_trace, st.start + 1)?;

    let pool = index.pool(Split::Base);
    let validating = cfg.eval_interval > 0 && cfg.val_episodes > 0;
    let save = |st: &State, path: &Path, episode: u64| -> Result<()> {
        let extra = match st.best {
            Some((e, a)) => json!({ "best_episode": e, "best_val_acc": a }),
            None => json!({}),
        };
        checkpoint::save(
            path,
            SaveRequest { fingerprint: &fingerprint, module: &st.model, adam: Some(&st.adam), episode, norm, extra },
        )
    };
    if fresh {
        save(&st, &best, 0)?;
    }

    let mut pending = String::new();
    let mut last_loss = None;
    for e in st.start..cfg.max_episodes {
        let plan = sample_episode(&pool, cfg.c_way, cfg.k_shot, cfg.n_query_train, &mut episode_rng(cfg.seed, e))?;
        let batch = episode_batch(store, &plan)?;
        let loss = train_step(&mut st.model, &mut st.adam, &batch, cfg.lr(e), e)?;
        pending.push_str(&format!("{e}\t{loss:?}\n"));
        last_loss = Some(loss);
        let done = e + 1;
        let boundary = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
        if boundary || done == cfg.max_episodes {
            flush(&trace, &mut pending)?;
            if validating {
                let acc = validate(&st.model, &cfg, index, store)?;
                append_line(&val_trace, &format!("{done}\t{acc:?}"))?;
                info!("episode {done}: loss {loss:.5}, val acc {acc:.4}");
                if st.best.is_none_or(|(_, b)| acc > b) {
                    st.best = Some((done, acc));
                    save(&st, &best, done)?;
                }
            } else {
                info!("episode {done}: loss {loss:.5}");
            }
            save(&st, &last, done)?;
        }
    }
    if cfg.max_episodes <= st.start {
        save(&st, &last, st.start)?;
    }
    if !validating && cfg.max_episodes > st.start {
        std::fs::copy(&last, &best).map_err(io_err(&best))?;
    }
    Ok(TrainOutcome { episodes: cfg.max_episodes.max(st.start), last_loss, best_val: st.best, last, best })
}

fn flush(path: &Path, pending: &mut String) -> Result<()> {
    if pending.is_empty() {
        return Ok(());
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(pending.as_bytes()).map_err(io_err(path))?;
    pending.clear();
    Ok(())
}

/// Parses a loss trace back into `(episode, loss)` pairs.
pub fn read_trace(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|l| {
            let (e, v) = l.split_once('\t').ok_or_else(|| Error::Format { path: path.into(), reason: l.into() })?;
            match (e.parse(), v.parse()) {
                (Ok(e), Ok(v)) => Ok((e, v)),
                _ => Err(Error::Format { path: path.into(), reason: l.into() }),
            }
        })
        .collect()
}
