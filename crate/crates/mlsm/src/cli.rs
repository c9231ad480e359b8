//! Command-line interface. Every flag maps onto a dotted configuration key,
//! applied after the config file and any `--set` overrides.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::toy::{self, ToySpec};

#[derive(Debug, Parser)]
#[command(name = "mlsm", version, about = "Few-shot classification with multi-level similarity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (`seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core (`run.workers`).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Single worker, for bit-reproducible runs (`run.deterministic`).
    #[arg(long)]
    pub deterministic: bool,
    /// Output directory of the command.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` configuration override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the class split index and normalization statistics.
    Prepare {
        /// Dataset root with one directory per class (`data.root`).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Write the synthetic toy image set into the root first.
        #[arg(long)]
        generate_toy: bool,
        /// Classes in the generated toy set.
        #[arg(long, default_value_t = 20)]
        toy_classes: usize,
        /// Images per toy class.
        #[arg(long, default_value_t = 60)]
        toy_per_class: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the base-class classifier used for Grad-CAM localization.
    TrainLocalizer {
        /// Optimizer steps (`localizer.steps`).
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Extract one object crop per image into a crop cache.
    Localize {
        /// Localizer checkpoint (`localizer.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image directory; defaults to `data.root`.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Heatmap threshold as a fraction of the peak (`localizer.threshold`).
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write heatmap composites under `<out>/overlay`.
        #[arg(long)]
        overlay: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Episodic training of the similarity model.
    Train {
        /// Levels to fuse: I, I+G or I+G+O (`model.levels`).
        #[arg(long)]
        ablation: Option<String>,
        /// Episodes to train (`train.max_episodes`).
        #[arg(long)]
        episodes: Option<u64>,
        /// Continue from `<out>/last.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint over random episodes.
    Eval {
        /// Model checkpoint (`eval.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Classes per episode (`eval.way`).
        #[arg(long)]
        way: Option<usize>,
        /// Labelled images per class (`eval.shot`).
        #[arg(long)]
        shot: Option<usize>,
        /// Number of episodes (`eval.episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Total queries per episode (`eval.n_query`).
        #[arg(long)]
        n_query: Option<usize>,
        /// Split to evaluate on (`eval.split`).
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the level ablation grid and print its table.
    Ablation {
        /// Directory holding one training run per cell, e.g. `IGO-5shot`.
        #[arg(long, default_value = "runs/ablation-train")]
        runs: PathBuf,
        /// Train cells that have no checkpoint yet.
        #[arg(long)]
        train_missing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write heatmap composites (image, heatmap with box, crop) per image.
    Overlay {
        /// Localizer checkpoint (`localizer.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image directory; defaults to `data.root`.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Heatmap threshold (`localizer.threshold`).
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("run.workers", common.workers.map(|v| v.to_string())),
        ("run.deterministic", common.deterministic.then(|| "true".to_string())),
    ];
    for (k, v) in flags.into_iter().chain(extra) {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn quoted(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

fn quoted_str(s: &Option<String>) -> Option<String> {
    s.as_ref().map(|s| format!("{s:?}"))
}

fn num<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn init_workers(config: &RunConfig) {
    let n = config.workers();
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
}

/// Runs a parsed command, returning the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Prepare { root, generate_toy, toy_classes, toy_per_class, common } => {
            let mut extra = vec![("data.root", quoted(&root))];
            extra.push(("data.index", quoted(&common.out)));
            let config = resolve(&common, extra)?;
            init_workers(&config);
            if generate_toy {
                let spec =
                    ToySpec { classes: toy_classes, per_class: toy_per_class, seed: config.seed, ..ToySpec::default() };
                toy::generate(&config.data.root, &spec, common.force)?;
            }
            let s = pipeline::prepare(&config, common.force)?;
            let state = if s.changed { "written" } else { "unchanged" };
            Ok(format!("{} ({state}: {})", s.index.summary(), config.data.index.display()))
        }
        Command::TrainLocalizer { steps, common } => {
            let config = resolve(&common, vec![("localizer.steps", num(&steps))])?;
            init_workers(&config);
            let out = common.out.clone().unwrap_or_else(|| default_parent(&config.localizer.checkpoint));
            let s = pipeline::train_localizer(&config, &out, common.force)?;
            Ok(format!(
                "train_acc {:.4} final_loss {:.5} checkpoint {}",
                s.train_acc,
                s.final_loss,
                s.checkpoint.display()
            ))
        }
        Command::Localize { checkpoint, images, threshold, overlay, common } => {
            let config = resolve(
                &common,
                vec![
                    ("localizer.checkpoint", quoted(&checkpoint)),
                    ("localizer.threshold", num(&threshold)),
                    ("data.crops", quoted(&common.out)),
                ],
            )?;
            init_workers(&config);
            let images = images.unwrap_or_else(|| config.data.root.clone());
            let s = pipeline::localize(
                &config.localizer.checkpoint,
                &images,
                &config.data.crops,
                config.localizer.threshold,
                overlay,
                common.force,
            )?;
            Ok(format!("crops written {} reused {} in {}", s.written, s.reused, config.data.crops.display()))
        }
        Command::Train { ablation, episodes, resume, common } => {
            let config = resolve(
                &common,
                vec![("model.levels", quoted_str(&ablation)), ("train.max_episodes", num(&episodes))],
            )?;
            init_workers(&config);
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            let o = pipeline::train_run(&config, &out, common.force, resume)?;
            let val = o.best_val.map_or("none".to_string(), |(e, a)| format!("{a:.4} at episode {e}"));
            Ok(format!("episodes {} best_val {val} best {}", o.episodes, o.best.display()))
        }
        Command::Eval { checkpoint, way, shot, episodes, n_query, split, common } => {
            let config = resolve(
                &common,
                vec![
                    ("eval.checkpoint", quoted(&checkpoint)),
                    ("eval.way", num(&way)),
                    ("eval.shot", num(&shot)),
                    ("eval.episodes", num(&episodes)),
                    ("eval.n_query", num(&n_query)),
                    ("eval.split", quoted_str(&split)),
                ],
            )?;
            init_workers(&config);
            let ckpt = config.eval.checkpoint.clone();
            let out = common.out.clone().unwrap_or_else(|| default_parent(&ckpt));
            let (path, r) = pipeline::eval_run(&config, &ckpt, &out, common.force)?;
            Ok(format!(
                "{} {}-way {}-shot: {:.2} ± {:.2} over {} episodes (report {})",
                r.report.levels,
                r.report.protocol.c_way,
                r.report.protocol.k_shot,
                100.0 * r.report.mean_acc,
                100.0 * r.report.ci95,
                r.report.protocol.n_episodes,
                path.display()
            ))
        }
        Command::Ablation { runs, train_missing, common } => {
            let config = resolve(&common, vec![])?;
            init_workers(&config);
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablation"));
            pipeline::ablation(&config, &runs, &out, train_missing, common.force)
        }
        Command::Overlay { checkpoint, images, threshold, common } => {
            let config = resolve(
                &common,
                vec![("localizer.checkpoint", quoted(&checkpoint)), ("localizer.threshold", num(&threshold))],
            )?;
            init_workers(&config);
            let images = images.unwrap_or_else(|| config.data.root.clone());
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/overlay"));
            let n = pipeline::overlay(
                &config.localizer.checkpoint,
                &images,
                &out,
                config.localizer.threshold,
                common.force,
            )?;
            Ok(format!("{n} composites written to {}", out.display()))
        }
    }
}

fn default_parent(p: &std::path::Path) -> PathBuf {
    p.parent().map(PathBuf::from).unwrap_or_default()
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Exists(_) = e {
                eprintln!("hint: choose another --out or pass --force");
            }
            e.exit_code()
        }
    }
}
