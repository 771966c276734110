//! Optimization loop, learning-rate schedules and run bookkeeping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig, ImageSizes, Sample};
use crate::checkpoint::{self, TrainProgress};
use crate::dataio::batch_order;
use crate::error::{GazeError, Result};
use crate::eval;
use crate::model::{batch_from_samples, compute_mean_images, GazeModel};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::{cast, Ctx, Real};
use crate::predict::InferenceConfig;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    StepDecay,
    Cyclic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepDecay {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_lr: f64,
    pub boundary_epoch: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            final_lr: 1e-4,
            boundary_epoch: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cyclic {
    pub min_lr: f64,
    pub max_lr: f64,
    pub period_epochs: f64,
}

impl Default for Cyclic {
    fn default() -> Self {
        Self {
            min_lr: 5e-4,
            max_lr: 3e-3,
            period_epochs: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: ScheduleKind,
    pub step_decay: StepDecay,
    pub cyclic: Cyclic,
    pub seed: u64,
    pub loss: LossKind,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerChoice::SgdMomentum,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: ScheduleKind::StepDecay,
            step_decay: StepDecay::default(),
            cyclic: Cyclic::default(),
            seed: 0,
            loss: LossKind::Mse,
            grad_clip: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GazeError::Config(m));
        if self.epochs == 0 {
            return err("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return err("train.batch_size and train.eval_batch_size must be at least 1".into());
        }
        if !(self.cyclic.min_lr < self.cyclic.max_lr) {
            return err("train.cyclic.min_lr must be below train.cyclic.max_lr".into());
        }
        if self.cyclic.period_epochs <= 0.0 {
            return err("train.cyclic.period_epochs must be positive".into());
        }
        if self.schedule == ScheduleKind::StepDecay
            && self.epochs > 1
            && !(1..self.epochs).contains(&self.step_decay.boundary_epoch)
        {
            return err(format!(
                "train.step_decay.boundary_epoch must lie in [1, {})",
                self.epochs
            ));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return err("train.grad_clip must be positive".into());
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::SgdMomentum => OptimizerKind::Sgd {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    /// Learning rate at a fractional epoch position.
    pub fn lr_at(&self, progress: f64) -> f64 {
        match self.schedule {
            ScheduleKind::StepDecay => {
                let e = (progress.floor() as usize).min(self.epochs - 1);
                step_decay_lr(e, self.epochs, &self.step_decay).expect("clamped epoch")
            }
            ScheduleKind::Cyclic => cyclic_lr(progress, &self.cyclic),
        }
    }
}

pub fn step_decay_lr(epoch: usize, epochs: usize, cfg: &StepDecay) -> Result<f64> {
    if epoch >= epochs {
        return Err(GazeError::EpochOutOfRange { epoch, epochs });
    }
    Ok(if epoch < cfg.boundary_epoch {
        cfg.initial
    } else {
        cfg.final_lr
    })
}

/// Triangular cycle starting at `min_lr`, peaking at half a period.
pub fn cyclic_lr(progress: f64, cfg: &Cyclic) -> f64 {
    let pos = (progress.max(0.0) / cfg.period_epochs).fract();
    let tri = if pos < 0.5 { 2.0 * pos } else { 2.0 - 2.0 * pos };
    cfg.min_lr + (cfg.max_lr - cfg.min_lr) * tri
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss<T: Real>(pred: &Array2<T>, truth: &Array2<T>, kind: LossKind) -> Result<(f64, Array2<T>)> {
    if pred.dim() != truth.dim() {
        return Err(GazeError::Shape {
            field: "pred".into(),
            reason: format!("{:?} vs truth {:?}", pred.dim(), truth.dim()),
        });
    }
    let b = pred.dim().0.max(1) as f64;
    let diff = pred - truth;
    match kind {
        LossKind::Mse => {
            let n = pred.len().max(1) as f64;
            let value = diff.iter().map(|d| d.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>() / n;
            Ok((value, diff.mapv(|d| d * cast::<T>(2.0 / n))))
        }
        LossKind::Euclidean => {
            let mut value = 0.0;
            let mut grad = Array2::zeros(diff.raw_dim());
            for (i, row) in diff.rows().into_iter().enumerate() {
                let norm = row.iter().map(|d| d.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
                value += norm;
                if norm > 0.0 {
                    for (j, d) in row.iter().enumerate() {
                        grad[[i, j]] = *d * cast::<T>(1.0 / (norm * b));
                    }
                }
            }
            Ok((value / b, grad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_error_cm: Option<f64>,
    /// Learning rate used at every optimizer step of the epoch.
    pub lr_trace: Vec<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mean_error_cm,lr_first,lr_last,wall_time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.val_mean_error_cm.map_or(String::new(), |v| v.to_string()),
                e.lr_trace.first().copied().unwrap_or(f64::NAN),
                e.lr_trace.last().copied().unwrap_or(f64::NAN),
                e.wall_time_s
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GazeError::Config(format!("{}: {e}", path.display())))
    }

    fn update_best(&mut self) {
        self.best_epoch = self
            .epochs
            .iter()
            .filter_map(|e| e.val_mean_error_cm.map(|v| (e.epoch, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e);
    }
}

/// Prepared samples at crop resolution.
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `last.safetensors`, `best.safetensors` and history files go.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (for resumption tests).
    pub stop_after: Option<usize>,
    pub quiet: bool,
    /// Stored in checkpoints so they can be served directly.
    pub inference: Option<InferenceConfig>,
}

/// Trains `model` in place.
pub fn train(
    model: &mut GazeModel<f32>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    sizes: ImageSizes,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    cfg.validate()?;
    aug.validate()?;
    if data.train.is_empty() {
        return Err(GazeError::EmptySplit("training split has no frames".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer_kind(), &model.params);
    let mut history = TrainHistory::default();
    let mut start_epoch = 0;
    let mut global_step = 0u64;
    if let Some(path) = &opts.resume_from {
        let loaded = checkpoint::load::<f32>(path)?;
        *model = loaded.model;
        optimizer = loaded
            .optimizer
            .ok_or_else(|| GazeError::Checkpoint("checkpoint has no optimizer state".into()))?;
        start_epoch = loaded.progress.epoch;
        global_step = loaded.progress.global_step;
        if let Some(dir) = &opts.out_dir {
            let h = dir.join("history.json");
            if h.exists() {
                history = TrainHistory::load(&h)?;
                history.epochs.truncate(start_epoch);
            }
        }
    }
    if model.config.mean_image_subtraction && model.mean_images.is_none() {
        let resized: Vec<Sample> = data
            .train
            .iter()
            .map(|s| crate::augment::eval_sample(s, sizes))
            .collect::<Result<_>>()?;
        model.mean_images = Some(compute_mean_images(&resized, aug)?);
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let end_epoch = opts
        .stop_after
        .map_or(cfg.epochs, |k| (start_epoch + k).min(cfg.epochs));
    for epoch in start_epoch..end_epoch {
        let t0 = Instant::now();
        let order = batch_order(n, cfg.batch_size, true, rng::derive_seed(cfg.seed, &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr_trace = Vec::with_capacity(order.len());
        for (step, ids) in order.iter().enumerate() {
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lr = cfg.lr_at(progress);
            lr_trace.push(lr);
            let mut arng = rng::stream(cfg.seed, &[rng::tag::AUGMENT, aug.seed, epoch as u64, step as u64]);
            let samples: Vec<Sample> = ids
                .iter()
                .map(|&i| augment_sample(&data.train[i], aug, sizes, &mut arng))
                .collect::<Result<_>>()?;
            let batch = batch_from_samples(&samples, aug);
            let truth = batch.gaze_cm.clone().expect("training labels");
            let mut drng = rng::stream(cfg.seed, &[rng::tag::DROPOUT, epoch as u64, step as u64]);
            let mut grads = model.params.zero_grads();
            let (value, updates) = {
                let mut ctx = Ctx::train(&model.params, &mut drng);
                let (pred, cache) = model.forward(&mut ctx, &batch)?;
                let (value, dpred) = loss(&pred, &truth, cfg.loss)?;
                if value.is_finite() {
                    model.backward(&mut ctx, cache, dpred, &mut grads);
                }
                (value, std::mem::take(&mut ctx.buffer_updates))
            };
            let grad_norm = grads.global_norm();
            if !value.is_finite() || !grad_norm.is_finite() {
                return Err(GazeError::NonFiniteLoss {
                    epoch,
                    step,
                    lr,
                    grad_norm,
                    batch_ids: samples.iter().map(|s| s.meta.frame_id.clone()).collect(),
                });
            }
            if let Some(max) = cfg.grad_clip {
                if grad_norm > max {
                    let k: f32 = (max / grad_norm) as f32;
                    for g in grads.values.iter_mut() {
                        g.mapv_inplace(|v| v * k);
                    }
                }
            }
            optimizer.step(&mut model.params, &grads, lr);
            model.params.apply_buffer_updates(updates);
            loss_sum += value * ids.len() as f64;
            global_step += 1;
        }
        let val_err = if data.val.is_empty() {
            None
        } else {
            Some(eval::mean_error(model, data.val, aug, sizes, cfg.eval_batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_mean_error_cm: val_err,
            lr_trace,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if !opts.quiet {
            log::info!(
                "epoch {epoch}: train loss {:.4}, val error {}",
                record.train_loss,
                val_err.map_or("n/a".into(), |v| format!("{v:.4} cm"))
            );
        }
        history.epochs.push(record);
        let prev_best = history.best_epoch;
        history.update_best();
        if let Some(dir) = &opts.out_dir {
            let progress = TrainProgress {
                epoch: epoch + 1,
                seed: cfg.seed,
                global_step,
                best_val_error_cm: history
                    .best_epoch
                    .and_then(|b| history.epochs.iter().find(|e| e.epoch == b))
                    .and_then(|e| e.val_mean_error_cm),
            };
            let last = dir.join("last.safetensors");
            checkpoint::save_with_inference(&last, model, Some(&optimizer), &progress, opts.inference.as_ref())?;
            if history.best_epoch == Some(epoch) && (prev_best != Some(epoch)) {
                let best = dir.join("best.safetensors");
                checkpoint::save_with_inference(&best, model, Some(&optimizer), &progress, opts.inference.as_ref())?;
            }
            history.checkpoints = vec![last];
            if history.best_epoch.is_some() {
                history.checkpoints.push(dir.join("best.safetensors"));
            }
            std::fs::write(dir.join("history.json"), history.to_json())
                .map_err(|e| GazeError::io(dir.join("history.json"), e))?;
            std::fs::write(dir.join("history.csv"), history.to_csv())
                .map_err(|e| GazeError::io(dir.join("history.csv"), e))?;
        }
    }
    Ok(history)
}
