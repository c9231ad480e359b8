//! Run configuration: a TOML file of dotted keys, overridden by flags.

use std::path::{Path, PathBuf};

use mlsm_core::encoder::Levels;
use mlsm_core::relation::LossKind;
use mlsm_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for initialization, episode sampling and evaluation.
    pub seed: u64,
    pub data: DataConfig,
    pub localizer: LocalizerConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Directory holding `index.tsv`, `classes.tsv` and `norm.tsv`.
    pub index: PathBuf,
    pub split_seed: u64,
    pub image_size: usize,
    /// Crop cache written by `localize`.
    pub crops: PathBuf,
    /// A missing crop is an error when set, otherwise the full image stands in.
    pub strict_crops: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub fused_dim: usize,
    pub hidden: usize,
    pub levels: String,
    pub loss: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub c_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub max_episodes: u64,
    pub lr0: f64,
    pub lr_half_period: u64,
    pub eval_interval: u64,
    pub val_episodes: usize,
    pub n_query_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub split: String,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    /// Total queries per episode.
    pub n_query: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// 0 means one worker per available core.
    pub workers: usize,
    pub deterministic: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            index: PathBuf::from("runs/index"),
            split_seed: 0,
            image_size: 84,
            crops: PathBuf::from("runs/crops"),
            strict_crops: true,
        }
    }
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            checkpoint: PathBuf::from("runs/localizer/localizer.ckpt"),
            steps: 2000,
            batch_size: 32,
            lr: 0.001,
            threshold: 0.2,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { fused_dim: 64, hidden: 8, levels: "I+G+O".into(), loss: "mse".into() }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            c_way: 5,
            k_shot: 1,
            n_query: 75,
            max_episodes: 500_000,
            lr0: 0.001,
            lr_half_period: 100_000,
            eval_interval: 1000,
            val_episodes: 100,
            n_query_val: 75,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: PathBuf::from("runs/train/best.ckpt"),
            split: "novel".into(),
            episodes: 100,
            way: 5,
            shot: 1,
            n_query: 200,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file at `path` (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.image_size < 4 {
            return bad("data.image_size must be at least 4");
        }
        if !(self.localizer.threshold > 0.0 && self.localizer.threshold < 1.0) {
            return bad("localizer.threshold must lie in (0, 1)");
        }
        if self.localizer.batch_size == 0 || self.localizer.lr.is_nan() || self.localizer.lr <= 0.0 {
            return bad("localizer.batch_size and localizer.lr must be positive");
        }
        self.levels()?;
        self.loss()?;
        self.train_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.way == 0 || self.eval.shot == 0 || self.eval.n_query == 0 {
            return bad("eval.way, eval.shot and eval.n_query must be positive");
        }
        if self.model.fused_dim == 0 || self.model.hidden == 0 {
            return bad("model.fused_dim and model.hidden must be positive");
        }
        Ok(())
    }

    pub fn levels(&self) -> Result<Levels> {
        Levels::parse(&self.model.levels).ok_or_else(|| {
            Error::Config(format!("model.levels: expected I, I+G or I+G+O, got {:?}", self.model.levels))
        })
    }

    pub fn loss(&self) -> Result<LossKind> {
        LossKind::parse(&self.model.loss)
            .ok_or_else(|| Error::Config(format!("model.loss: expected mse or bce, got {:?}", self.model.loss)))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            image_size: self.data.image_size,
            fused_dim: self.model.fused_dim,
            hidden: self.model.hidden,
            levels: self.levels()?,
            loss: self.loss()?,
        })
    }

    pub fn train_config(&self) -> Result<mlsm_core::engine::TrainConfig> {
        let t = &self.train;
        Ok(mlsm_core::engine::TrainConfig {
            c_way: t.c_way,
            k_shot: t.k_shot,
            n_query_train: t.n_query,
            max_episodes: t.max_episodes,
            lr0: t.lr0,
            lr_half_period: t.lr_half_period,
            seed: self.seed,
            levels: self.levels()?,
            loss: self.loss()?,
            eval_interval: t.eval_interval,
            val_episodes: t.val_episodes,
            n_query_val: t.n_query_val,
        })
    }

    /// Worker count after applying `run.deterministic`.
    pub fn workers(&self) -> usize {
        if self.run.deterministic {
            1
        } else if self.run.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.run.workers
        }
    }

    /// Fully resolved configuration as sorted `dotted.key = value` lines.
    pub fn to_flat_toml(&self) -> String {
        let value = toml::Value::try_from(self).expect("configuration serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_flat_toml()).map_err(io_err(path))
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push(format!("{prefix} = {v}")),
    }
}

/// Splits `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
