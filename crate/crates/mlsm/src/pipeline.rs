//! The pipeline stages behind each subcommand, driven by a resolved
//! [`RunConfig`].

use std::path::{Path, PathBuf};

use log::info;
use mlsm_core::engine::EvalProtocol;

use crate::config::RunConfig;
use crate::data::{build_index, compute_norm, write_atomic, DatasetIndex, ImageStore, NormStats, Split};
use crate::error::{io_err, Error, Result};
use crate::eval::{self, cell_name, EvalInputs, ReportFile};
use crate::localize::{self, LocalizeSummary, Localizer};
use crate::train::{self, TrainInputs, TrainOutcome};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOCALIZER_CKPT: &str = "localizer.ckpt";
pub const LOCALIZER_TRACE: &str = "localizer_trace.tsv";
pub const TABLE_FILE: &str = "ablation.txt";

/// Refuses to reuse `dir` if any of `artifacts` already exist inside it,
/// unless `force` is set.
pub fn claim_dir(dir: &Path, artifacts: &[&str], force: bool) -> Result<()> {
    if !force {
        if let Some(hit) = artifacts.iter().map(|a| dir.join(a)).find(|p| p.exists()) {
            return Err(Error::Exists(hit));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.as_os_str().is_empty() || !path.exists() {
        return Err(Error::Missing(format!("{} not found; {hint}", path.display())));
    }
    Ok(())
}

fn load_index(config: &RunConfig) -> Result<(DatasetIndex, NormStats)> {
    let dir = &config.data.index;
    require(&dir.join(crate::data::INDEX_FILE), "run `mlsm prepare` first")?;
    Ok((DatasetIndex::load(dir)?, NormStats::load(dir)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub index: DatasetIndex,
    pub norm: NormStats,
    pub changed: bool,
}

/// Builds the split index and base-split normalization statistics. Running
/// it again on the same data leaves the files untouched.
pub fn prepare(config: &RunConfig, force: bool) -> Result<PrepareSummary> {
    let index = build_index(&config.data.root, config.data.split_seed)?;
    let norm = compute_norm(&config.data.root, &index, config.data.image_size)?;
    let dir = &config.data.index;
    let existing = match (DatasetIndex::load(dir), NormStats::load(dir)) {
        (Ok(i), Ok(n)) => Some((i, n)),
        _ => None,
    };
    if existing.as_ref() == Some(&(index.clone(), norm)) {
        return Ok(PrepareSummary { index, norm, changed: false });
    }
    claim_dir(dir, &[crate::data::INDEX_FILE, crate::data::NORM_FILE], force)?;
    index.save(dir)?;
    norm.save(dir)?;
    config.save(&dir.join(CONFIG_FILE))?;
    Ok(PrepareSummary { index, norm, changed: true })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerSummary {
    pub checkpoint: PathBuf,
    pub train_acc: f64,
    pub final_loss: f64,
}

/// Trains the base classifier and writes `localizer.ckpt` into `out`.
pub fn train_localizer(config: &RunConfig, out: &Path, force: bool) -> Result<LocalizerSummary> {
    let (index, norm) = load_index(config)?;
    claim_dir(out, &[LOCALIZER_CKPT, LOCALIZER_TRACE], force)?;
    config.save(&out.join(CONFIG_FILE))?;
    let store = ImageStore::load(&config.data.root, &index, &[Split::Base], config.data.image_size, &norm, None)?;
    let l = &config.localizer;
    let run = localize::train_classifier(&store, &index, l.steps, l.batch_size, l.lr, config.seed)?;
    let trace: String = run.losses.iter().enumerate().map(|(s, v)| format!("{s}\t{v:?}\n")).collect();
    write_atomic(&out.join(LOCALIZER_TRACE), trace.as_bytes())?;
    let ckpt = out.join(LOCALIZER_CKPT);
    let names = localize::base_class_names(&index);
    localize::save_classifier(&ckpt, &run.classifier, config.data.image_size, norm, &names, l.steps)?;
    info!("localizer trained: accuracy {:.4} over the final steps", run.train_acc);
    Ok(LocalizerSummary {
        checkpoint: ckpt,
        train_acc: run.train_acc,
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Writes one object crop per image under `images` into `out`.
pub fn localize(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    threshold: f64,
    overlay: bool,
    force: bool,
) -> Result<LocalizeSummary> {
    require(checkpoint, "run `mlsm train-localizer` first or pass --checkpoint")?;
    let loc = Localizer::load(checkpoint)?;
    let overlay_dir = overlay.then(|| out.join("overlay"));
    localize::localize_dir(&loc, images, out, threshold, force, overlay_dir.as_deref())
}

/// Writes one CAM composite per image under `images` into `out`.
pub fn overlay(checkpoint: &Path, images: &Path, out: &Path, threshold: f64, force: bool) -> Result<usize> {
    require(checkpoint, "run `mlsm train-localizer` first or pass --checkpoint")?;
    let loc = Localizer::load(checkpoint)?;
    if !force && out.is_dir() && std::fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        return Err(Error::Exists(out.to_path_buf()));
    }
    localize::overlay_dir(&loc, images, out, threshold)
}

fn load_store(
    config: &RunConfig,
    index: &DatasetIndex,
    norm: &NormStats,
    splits: &[Split],
    image_size: usize,
    crops: bool,
) -> Result<ImageStore> {
    let crop_dir = crops.then_some(config.data.crops.as_path());
    if let Some(dir) = crop_dir {
        if config.data.strict_crops {
            require(&dir.join(localize::MANIFEST), "run `mlsm localize` first or set data.strict_crops = false")?;
        }
    }
    ImageStore::load(
        &config.data.root,
        index,
        splits,
        image_size,
        norm,
        crop_dir.map(|d| (d, config.data.strict_crops)),
    )
}

/// Episodic training into `out`. With `resume` the run continues from
/// `out/last.ckpt` when present.
pub fn train_run(config: &RunConfig, out: &Path, force: bool, resume: bool) -> Result<TrainOutcome> {
    let (index, norm) = load_index(config)?;
    if !resume {
        claim_dir(out, &[train::LAST, train::BEST, train::LOSS_TRACE], force)?;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    config.save(&out.join(CONFIG_FILE))?;
    let model = config.model_config()?;
    let store =
        load_store(config, &index, &norm, &[Split::Base, Split::Val], model.image_size, model.levels.uses_object())?;
    train::train(TrainInputs {
        model,
        train: config.train_config()?,
        index: &index,
        store: &store,
        norm,
        run_dir: out,
        resume,
    })
}

pub fn eval_protocol(config: &RunConfig, k_shot: usize) -> Result<EvalProtocol> {
    let split: Split = config.eval.split.parse()?;
    Ok(EvalProtocol {
        split: split.to_string(),
        n_episodes: config.eval.episodes,
        c_way: config.eval.way,
        k_shot,
        n_query: config.eval.n_query,
        seed: config.seed,
    })
}

pub fn report_name(p: &EvalProtocol) -> String {
    format!("eval_{}_{}way_{}shot.txt", p.split, p.c_way, p.k_shot)
}

/// Evaluates `checkpoint` and writes its report into `out`.
pub fn eval_run(config: &RunConfig, checkpoint: &Path, out: &Path, force: bool) -> Result<(PathBuf, ReportFile)> {
    require(checkpoint, "train a model first or pass --checkpoint")?;
    let (index, _) = load_index(config)?;
    let loaded = eval::load_model(checkpoint)?;
    let protocol = eval_protocol(config, config.eval.shot)?;
    let path = out.join(report_name(&protocol));
    claim_dir(out, &[&report_name(&protocol)], force)?;
    let split: Split = protocol.split.parse()?;
    let m = &loaded.model.config;
    let store = load_store(config, &index, &loaded.header.norm(), &[split], m.image_size, m.levels.uses_object())?;
    let report = eval::evaluate(EvalInputs {
        model: &loaded.model,
        header: &loaded.header,
        checkpoint,
        store: &store,
        index: &index,
        protocol,
    })?;
    report.save(&path)?;
    Ok((path, report))
}

/// Evaluates every (levels, shot) cell whose checkpoint lives at
/// `runs/<cell>/best.ckpt`, training missing cells first when asked.
pub fn ablation(config: &RunConfig, runs: &Path, out: &Path, train_missing: bool, force: bool) -> Result<String> {
    claim_dir(out, &[TABLE_FILE], force)?;
    let mut cells = Vec::new();
    for levels in ["I", "I+G", "I+G+O"] {
        for k in [1usize, 5] {
            let dir = runs.join(cell_name(levels, k));
            let ckpt = dir.join(train::BEST);
            let mut cell_cfg = config.clone();
            cell_cfg.model.levels = levels.into();
            cell_cfg.train.k_shot = k;
            cell_cfg.eval.shot = k;
            if !ckpt.exists() {
                if !train_missing {
                    info!("no checkpoint at {}; cell left empty", ckpt.display());
                    cells.push((levels.to_string(), k, None));
                    continue;
                }
                info!("training ablation cell {}", cell_name(levels, k));
                train_run(&cell_cfg, &dir, force, true)?;
            }
            let (path, report) = eval_run(&cell_cfg, &ckpt, &out.join(cell_name(levels, k)), force)?;
            if report.report.levels != levels {
                return Err(Error::Fingerprint {
                    path: ckpt,
                    reason: format!("expected levels {levels}, found {}", report.report.levels),
                });
            }
            info!("{}: {:.4} ({})", cell_name(levels, k), report.report.mean_acc, path.display());
            cells.push((levels.to_string(), k, Some(report.report)));
        }
    }
    let table = eval::render_ablation(&cells);
    write_atomic(&out.join(TABLE_FILE), table.as_bytes())?;
    config.save(&out.join(CONFIG_FILE))?;
    Ok(table)
}
