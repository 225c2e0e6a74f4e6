//! Training loop, deterministic episode streams, and evaluation.
//!
//! All randomness derives from per-episode seeds mixed from the run seed, so
//! batch parallelism and prefetch order cannot change results. Per-episode
//! gradients are reduced in batch order before the optimizer step.

use crate::checkpoint::{save_to_path, Checkpoint};
use crate::config::Config;
use crate::episodes::{generate_episode, Difficulty, Episode};
use crate::metrics::{self, MetricsReport};
use crate::model::{breakdown_from_terms, LossBreakdown, Model};
use crate::params::{self, AdamW};
use crate::tensor::{Precision, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

pub const TRAIN_STREAM: u64 = 1;
pub const VAL_STREAM: u64 = 2;

/// splitmix64 finalizer over chained words.
fn mix(words: &[u64]) -> u64 {
    let mut z = 0x9E3779B97F4A7C15u64;
    for &w in words {
        z = z.wrapping_add(w).wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z
}

/// Difficulty striping: the first n stream entries contain exactly
/// floor(n * motion_frac) motion-discriminative episodes.
pub fn stream_difficulty(cfg: &Config, index: usize) -> Difficulty {
    let mf = cfg.data.motion_frac;
    let before = (index as f64 * mf).floor();
    let after = ((index + 1) as f64 * mf).floor();
    if after > before {
        Difficulty::MotionDiscriminative
    } else {
        Difficulty::Appearance
    }
}

/// Episode `index` of a stream, generated from a mixed per-episode seed.
pub fn stream_episode(cfg: &Config, stream: u64, index: usize) -> Episode {
    let difficulty = stream_difficulty(cfg, index);
    let seed = mix(&[cfg.data.seed, stream, index as u64]);
    generate_episode(seed, difficulty, cfg.data.t, cfg.data.h, cfg.data.w, cfg.data.n_objects)
        .unwrap_or_else(|e| panic!("stream {} episode {} infeasible: {}", stream, index, e))
}

fn epoch_order(cfg: &Config, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..cfg.data.train_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.data.seed, 0xE70C4, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; offending batch episode seeds: {seeds:?}")]
    NonFiniteLoss { step: usize, seeds: Vec<u64> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps_run: usize,
    pub first_loss: LossBreakdown,
    pub last_loss: LossBreakdown,
    /// (step, held-out J&F) at every validation point.
    pub val_history: Vec<(usize, f64)>,
}

pub struct TrainOptions {
    /// Directory for checkpoints and the training log; skipped when None.
    pub out_dir: Option<std::path::PathBuf>,
    pub log_every: usize,
    pub val_every: usize,
    pub quiet: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { out_dir: None, log_every: 50, val_every: 250, quiet: false }
    }
}

/// Runs the configured number of optimizer steps from a fresh model.
pub fn train(config: Config, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(config);
    train_from(model, 0, opts)
}

/// Resumes (or starts) training from an existing model at `start_step`.
pub fn train_from(mut model: Model, start_step: usize, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let cfg = model.config.clone();
    let precision = Precision::from_env();
    let mut opt = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    opt.step_count = start_step as u64;

    let mut log: Option<std::fs::File> = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("train.log"))?)
        }
        None => None,
    };

    let val_set: Vec<(Episode, Difficulty)> = (0..cfg.data.val_size)
        .map(|i| (stream_episode(&cfg, VAL_STREAM, i), stream_difficulty(&cfg, i)))
        .collect();

    let mut first_loss = LossBreakdown::default();
    let mut last_loss = LossBreakdown::default();
    let mut val_history = Vec::new();

    let mut current_epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();

    for step in start_step..cfg.optim.steps {
        // Batch slots walk a per-epoch shuffled ordering of the train set.
        let mut batch: Vec<(usize, u64)> = Vec::with_capacity(cfg.optim.batch);
        for k in 0..cfg.optim.batch {
            let pos = step * cfg.optim.batch + k;
            let epoch = pos / cfg.data.train_size;
            if epoch != current_epoch {
                current_epoch = epoch;
                order = epoch_order(&cfg, epoch);
            }
            let idx = order[pos % cfg.data.train_size];
            let noise_seed = mix(&[cfg.data.seed, 0x6B31, step as u64, k as u64]);
            batch.push((idx, noise_seed));
        }

        let results: Vec<(Vec<Vec<f64>>, LossBreakdown, u64)> = batch
            .par_iter()
            .map(|&(idx, noise_seed)| {
                let ep = stream_episode(&cfg, TRAIN_STREAM, idx);
                let mut tape = Tape::with_precision(precision);
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let out = model.forward(&mut tape, &ep, Some(&mut rng), true);
                let terms = out.loss.as_ref().unwrap();
                tape.backward(terms.total);
                let grads = params::collect_grads(&tape, &out.bound, &model.store);
                (grads, breakdown_from_terms(&tape, terms), ep.seed)
            })
            .collect();

        // Fixed-order reduction keeps results independent of scheduling.
        let mut grads = results[0].0.clone();
        for r in &results[1..] {
            params::add_grads(&mut grads, &r.0);
        }
        let inv_batch = 1.0 / cfg.optim.batch as f64;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv_batch;
            }
        }
        let mut mean = LossBreakdown::default();
        for (_, b, _) in &results {
            mean.dice += b.dice * inv_batch;
            mean.focal += b.focal * inv_batch;
            mean.giou += b.giou * inv_batch;
            mean.l1 += b.l1 * inv_batch;
            mean.total += b.total * inv_batch;
        }
        if !mean.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                seeds: results.iter().map(|(_, _, s)| *s).collect(),
            });
        }
        if step == start_step {
            first_loss = mean.clone();
        }
        last_loss = mean.clone();

        params::clip_global_norm(&mut grads, cfg.optim.grad_clip);
        opt.step(&mut model.store, &grads);

        let line = format!(
            "step {:5}  total {:.5}  dice {:.5}  focal {:.5}  giou {:.5}  l1 {:.5}",
            step, mean.total, mean.dice, mean.focal, mean.giou, mean.l1
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{line}")?;
        }
        if !opts.quiet && (step % opts.log_every == 0 || step + 1 == cfg.optim.steps) {
            println!("{line}");
        }

        let at_val = (step + 1) % opts.val_every == 0 || step + 1 == cfg.optim.steps;
        if at_val {
            let report = evaluate(&model, &val_set.iter().map(|(e, _)| e.clone()).collect::<Vec<_>>());
            val_history.push((step + 1, report.jf));
            let vline = format!("step {:5}  val J&F {:.4} (J {:.4} F {:.4} oIoU {:.4})", step + 1, report.jf, report.j, report.f, report.oiou);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{vline}")?;
            }
            if !opts.quiet {
                println!("{vline}");
            }
            if let Some(dir) = &opts.out_dir {
                let ckpt = Checkpoint {
                    config: cfg.clone(),
                    step: (step + 1) as u64,
                    noise_seed: cfg.data.seed,
                    opt_steps: opt.step_count,
                    store: model.store.clone(),
                };
                save_to_path(&dir.join("checkpoint.tcdc"), &ckpt)?;
            }
        }
    }

    Ok(TrainOutcome { model, steps_run: cfg.optim.steps.saturating_sub(start_step), first_loss, last_loss, val_history })
}

/// Mean per-episode metrics over a set, noise disabled.
pub fn evaluate(model: &Model, episodes: &[Episode]) -> MetricsReport {
    let reports: Vec<MetricsReport> = episodes
        .par_iter()
        .map(|ep| {
            let preds = model.predict_masks(ep);
            let hw = ep.height * ep.width;
            let gts: Vec<Vec<bool>> = (0..ep.frames_len)
                .map(|ti| ep.gt_masks[ti * hw..(ti + 1) * hw].iter().map(|&v| v > 0.5).collect())
                .collect();
            metrics::sequence_metrics(&preds, &gts, ep.height, ep.width, model.config.eval.tolerance)
        })
        .collect();
    metrics::aggregate(&reports)
}

/// Validation episodes with their difficulty tags.
pub fn val_episodes(cfg: &Config) -> Vec<(Episode, Difficulty)> {
    (0..cfg.data.val_size)
        .map(|i| (stream_episode(cfg, VAL_STREAM, i), stream_difficulty(cfg, i)))
        .collect()
}

/// Writes evaluation artifacts for `cmd_eval`: the aggregate report plus the
/// motion-discriminative subset.
pub fn evaluate_with_subsets(model: &Model, set: &[(Episode, Difficulty)]) -> (MetricsReport, Option<MetricsReport>) {
    let all: Vec<Episode> = set.iter().map(|(e, _)| e.clone()).collect();
    let motion: Vec<Episode> = set
        .iter()
        .filter(|(_, d)| *d == Difficulty::MotionDiscriminative)
        .map(|(e, _)| e.clone())
        .collect();
    let overall = evaluate(model, &all);
    let motion_report = if motion.is_empty() { None } else { Some(evaluate(model, &motion)) };
    (overall, motion_report)
}

pub fn final_checkpoint(model: &Model, step: u64) -> Checkpoint {
    Checkpoint {
        config: model.config.clone(),
        step,
        noise_seed: model.config.data.seed,
        opt_steps: step,
        store: model.store.clone(),
    }
}

/// Loads a checkpoint into a model, validating structure.
pub fn model_from_checkpoint(path: &Path) -> Result<Model, crate::checkpoint::CheckpointError> {
    let ckpt = crate::checkpoint::load_from_path(path)?;
    crate::checkpoint::validate_store(&ckpt)?;
    Ok(Model::from_store(ckpt.config, ckpt.store))
}
