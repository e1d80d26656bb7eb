//! Minibatch training with Adam.
//!
//! Each batch is a slice of one seeded permutation per epoch. Per-example
//! gradients are averaged over the batch in permutation order and applied
//! in a single optimizer step, so a run is a pure function of the seed.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, AutodiffError};
use crate::model::{Mode, Model, ModelError};
use crate::preprocess::{ClipWindows, TrainingExample};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("dataset yields no windows")]
    EmptyDataset,
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Random access to training windows.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> TrainingExample;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for [TrainingExample] {
    fn len(&self) -> usize {
        <[TrainingExample]>::len(self)
    }
    fn get(&self, i: usize) -> TrainingExample {
        self[i].clone()
    }
}

impl Dataset for Vec<TrainingExample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> TrainingExample {
        self[i].clone()
    }
}

/// Windows of several clips, materialized on demand.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    clips: Vec<ClipWindows>,
    offsets: Vec<usize>,
}

impl WindowedDataset {
    pub fn new(clips: Vec<ClipWindows>) -> Self {
        let mut offsets = Vec::with_capacity(clips.len() + 1);
        offsets.push(0);
        for c in &clips {
            offsets.push(offsets.last().unwrap() + c.len());
        }
        Self { clips, offsets }
    }

    pub fn clips(&self) -> &[ClipWindows] {
        &self.clips
    }
}

impl Dataset for WindowedDataset {
    fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }
    fn get(&self, i: usize) -> TrainingExample {
        let c = self.offsets.partition_point(|&o| o <= i) - 1;
        self.clips[c].window(i - self.offsets[c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters after the epoch with the lowest mean training loss.
    pub best: Model,
    pub best_epoch: usize,
    /// Mean per-example training loss of every epoch.
    pub history: Vec<f64>,
    pub optimizer_steps: u64,
}

const SHUFFLE: u64 = 0x5348;
const DROPOUT: u64 = 0x4452;

pub fn train<D: Dataset + ?Sized>(model: Model, data: &D, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(model, data, cfg, &mut |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with<D: Dataset + ?Sized>(
    mut model: Model,
    data: &D,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = AdamState::new(cfg.lr, &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_path(cfg.seed, &[SHUFFLE, epoch as u64])));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
            let mut batch_loss = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            for (k, &i) in chunk.iter().enumerate() {
                let ex = data.get(i);
                let s = seed::derive_path(cfg.seed, &[DROPOUT, epoch as u64, b as u64, k as u64]);
                let (loss, grads) = match model.loss_and_grads(&ex, Mode::Train, s) {
                    Ok(r) => r,
                    Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => {
                        return Err(TrainError::NonFiniteLoss { epoch, batch: b })
                    }
                    Err(e) => return Err(e.into()),
                };
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: b });
                }
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            }
            for (p, g) in model.params.iter_mut().zip(acc) {
                p.grad = Some(g);
            }
            match adam_step(&mut model.params, &mut opt) {
                Ok(()) => {}
                Err(AutodiffError::NonFinite { .. }) => return Err(TrainError::NonFiniteLoss { epoch, batch: b }),
                Err(e) => return Err(e.into()),
            }
            total += batch_loss;
        }
        let mean = total / n as f64;
        on_epoch(epoch, mean);
        if history.iter().all(|&h| mean < h) {
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(mean);
    }
    for p in model.params.iter_mut().chain(best.params.iter_mut()) {
        p.grad = None;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
        optimizer_steps: opt.step_count,
    })
}

/// Optimizer steps a run takes: `epochs * ceil(n / batch_size)`.
pub fn expected_steps(n: usize, cfg: &TrainConfig) -> u64 {
    (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64
}
