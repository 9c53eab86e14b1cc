//! Optimization loop, evaluation, metrics and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    collect, decode, encode, encoded_size, load_checkpoint, restore, save_checkpoint, MAGIC, VELOCITY_PREFIX, VERSION,
};
pub use metrics::{EpochRecord, RunMetrics, CSV_HEADER};
pub use optim::{lr_at, nesterov_step, OptState, MOMENTUM, WEIGHT_DECAY};

use crate::arch::{Dataset, ForwardOptions, Model};
use crate::autodiff::Graph;
use crate::data::{augment_batch, batch_iter, with_prefetch, DatasetSplit, Splits};
use crate::ops::softmax_cross_entropy;
use crate::tensor::Float;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pad/crop/flip each training image.
    pub augment: bool,
    pub eval_batch: usize,
    /// Batches kept ready by the loader thread; 0 loads inline.
    pub prefetch: usize,
}

impl TrainConfig {
    /// Full schedule: 200 epochs at lr 0.01 for MNIST, 300 epochs at 0.1
    /// with augmentation for CIFAR.
    pub fn for_dataset(dataset: Dataset) -> Self {
        let mnist = dataset == Dataset::Mnist;
        Self {
            epochs: if mnist { 200 } else { 300 },
            batch_size: 64,
            base_lr: if mnist { 0.01 } else { 0.1 },
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            seed: 0,
            augment: !mnist,
            eval_batch: 256,
            prefetch: 0,
        }
    }

    /// Laptop-sized run: 5 epochs.
    pub fn desk(dataset: Dataset) -> Self {
        Self {
            epochs: 5,
            ..Self::for_dataset(dataset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Independent random stream `stream` derived from a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Glibc returns large freed blocks to the OS and faults them back in on the
/// next step, which costs more than the arithmetic at these tensor sizes.
/// Raising the mmap and trim thresholds keeps them in the heap.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Percent of training examples misclassified (in train mode).
    pub error: f64,
    pub examples: usize,
}

/// One pass over `split`: forward in train mode, cross-entropy, backward,
/// running-stat update and a Nesterov step per batch. `epoch` is 0-based and
/// selects the shuffle order and random stream.
pub fn train_epoch<T: Float>(
    model: &mut Model<T>,
    split: &DatasetSplit,
    opt: &mut OptState<T>,
    lr: f64,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut rng = stream_rng(cfg.seed, 2 * epoch as u64 + 1);
    let batches = batch_iter(split, cfg.batch_size, true, cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
    with_prefetch(batches, cfg.prefetch, |batches| {
        let (mut loss_sum, mut wrong, mut seen) = (0.0, 0, 0);
        for (i, mut batch) in batches.enumerate() {
            if cfg.augment {
                augment_batch(&mut batch, &mut rng);
            }
            let mut g = Graph::new();
            let x = g.constant(batch.images.cast::<T>());
            let pass = model.forward(&mut g, x, ForwardOptions::train(), &mut rng)?;
            let loss = softmax_cross_entropy(&mut g, pass.logits, &batch.labels)?;
            let lv = g.value(loss).item().map_or(f64::NAN, |v| v.as_f64());
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: i });
            }
            let preds = g.value(pass.logits).argmax_rows()?;
            g.backward_into(loss, &mut model.params)?;
            drop(g);
            model.apply_stat_updates(pass.stat_updates);
            nesterov_step(&mut model.params, opt, lr)?;
            model.params.zero_grads();

            let n = batch.labels.len();
            loss_sum += lv * n as f64;
            wrong += preds.iter().zip(&batch.labels).filter(|(p, l)| p != l).count();
            seen += n;
        }
        Ok(EpochStats {
            loss: loss_sum / seen.max(1) as f64,
            error: 100.0 * wrong as f64 / seen.max(1) as f64,
            examples: seen,
        })
    })
}

/// Eval-mode argmax prediction for every example, in order.
pub fn predict<T: Float>(model: &Model<T>, split: &DatasetSplit, batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(split.len());
    for b in batch_iter(split, batch, false, 0)? {
        out.extend(model.logits(&b.images.cast::<T>())?.argmax_rows()?);
    }
    Ok(out)
}

/// Percent of `split` misclassified in eval mode.
pub fn evaluate<T: Float>(model: &Model<T>, split: &DatasetSplit, batch: usize) -> Result<f64> {
    let preds = predict(model, split, batch)?;
    let wrong = preds.iter().zip(&split.labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / split.len().max(1) as f64)
}

/// Train for `cfg.epochs` epochs under the step schedule, evaluating on the
/// test split before training (row 0) and after every epoch. `on_epoch` sees
/// each row as it is produced.
pub fn fit<T: Float>(
    model: &mut Model<T>,
    opt: &mut OptState<T>,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunMetrics> {
    cfg.validate()?;
    tune_allocator();
    let mut metrics = RunMetrics::default();
    let start = Instant::now();
    let row = EpochRecord {
        epoch: 0,
        lr: lr_at(0, cfg.epochs.max(1), cfg.base_lr),
        train_loss: f64::NAN,
        train_err: f64::NAN,
        test_err: evaluate(model, &splits.test, cfg.eval_batch)?,
        seconds: start.elapsed().as_secs_f64(),
    };
    on_epoch(&row);
    metrics.push(row)?;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg.epochs, cfg.base_lr);
        let stats = train_epoch(model, &splits.train, opt, lr, cfg, epoch)?;
        let row = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: stats.loss,
            train_err: stats.error,
            test_err: evaluate(model, &splits.test, cfg.eval_batch)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row)?;
    }
    Ok(metrics)
}
