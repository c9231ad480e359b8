//! Training configuration, single training steps and the evaluation protocol.

use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::Levels;
use crate::episode::{episode_rng, sample_episode, EpisodePlan};
use crate::error::{invalid, Error, Result};
use crate::model::{EpisodeBatch, MlsmModel};
use crate::nn::Module;
use crate::optim::{lr_schedule, Adam};
use crate::relation::{predict, LossKind};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub c_way: usize,
    pub k_shot: usize,
    /// Total queries per training episode.
    pub n_query_train: usize,
    pub max_episodes: u64,
    pub lr0: f64,
    pub lr_half_period: u64,
    pub seed: u64,
    pub levels: Levels,
    pub loss: LossKind,
    /// Validate every this many episodes (0 disables validation).
    pub eval_interval: u64,
    pub val_episodes: usize,
    pub n_query_val: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c_way: 5,
            k_shot: 1,
            n_query_train: 75,
            max_episodes: 500_000,
            lr0: 0.001,
            lr_half_period: 100_000,
            seed: 0,
            levels: Levels::IGO,
            loss: LossKind::Mse,
            eval_interval: 1_000,
            val_episodes: 100,
            n_query_val: 75,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid("lr0 must be positive"));
        }
        if self.lr_half_period == 0 {
            return Err(invalid("lr_half_period must be positive"));
        }
        if self.c_way == 0 || self.k_shot == 0 || self.n_query_train == 0 {
            return Err(invalid("c_way, k_shot and n_query_train must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, episode: u64) -> f64 {
        lr_schedule(episode, self.lr0, self.lr_half_period)
    }
}

/// One optimizer step on one episode; `episode` is the zero-based counter
/// that selects the scheduled learning rate.
pub fn train_step<T: Real>(
    model: &mut MlsmModel<T>,
    adam: &mut Adam<T>,
    batch: &EpisodeBatch<T>,
    lr: f64,
    episode: u64,
) -> Result<f64> {
    model.zero_grad();
    let loss = model.accumulate_gradients(batch)?.to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: episode, value: loss });
    }
    adam.step(model, lr)?;
    Ok(loss)
}

/// Anything that can score an episode plan as `[n_query, c_way]`.
pub trait EpisodeScorer {
    fn score(&mut self, plan: &EpisodePlan) -> Result<Tensor<f64>>;
}

/// Fraction of queries whose argmax score hits the true label.
pub fn episode_accuracy(scores: &Tensor<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(scores).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn mean_ci95(acc: &[f64]) -> (f64, f64) {
    let n = acc.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = acc.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * num_traits::Float::sqrt(var) / num_traits::Float::sqrt(n as f64))
}

/// Protocol settings of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub split: String,
    pub n_episodes: usize,
    pub c_way: usize,
    pub k_shot: usize,
    /// Total queries per episode.
    pub n_query: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { split: String::from("novel"), n_episodes: 100, c_way: 5, k_shot: 1, n_query: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub per_episode_acc: Vec<f64>,
    pub mean_acc: f64,
    pub ci95: f64,
    pub levels: String,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn new(protocol: EvalProtocol, per_episode_acc: Vec<f64>, levels: String, fingerprint: String) -> Self {
        let (mean_acc, ci95) = mean_ci95(&per_episode_acc);
        EvalReport { protocol, per_episode_acc, mean_acc, ci95, levels, fingerprint }
    }

    /// Mean and interval agree with the stored per-episode accuracies.
    pub fn is_consistent(&self) -> bool {
        let (m, c) = mean_ci95(&self.per_episode_acc);
        self.per_episode_acc.len() == self.protocol.n_episodes
            && (m - self.mean_acc).abs() <= 1e-12
            && (c - self.ci95).abs() <= 1e-12
    }
}

/// Runs `protocol.n_episodes` episodes; episode `e` is drawn with
/// `episode_rng(protocol.seed, e)` so every episode is reproducible on its own.
pub fn evaluate_episodes<S: EpisodeScorer + ?Sized>(
    scorer: &mut S,
    pool: &[Vec<usize>],
    protocol: &EvalProtocol,
) -> Result<Vec<f64>> {
    (0..protocol.n_episodes)
        .map(|e| {
            let mut rng = episode_rng(protocol.seed, e as u64);
            let plan = sample_episode(pool, protocol.c_way, protocol.k_shot, protocol.n_query, &mut rng)?;
            let scores = scorer.score(&plan)?;
            scores.expect_shape(&[plan.query.len(), plan.c_way])?;
            Ok(episode_accuracy(&scores, &plan.query_labels()))
        })
        .collect()
}
