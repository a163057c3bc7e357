//! Minibatch training loop for the toy classifier.
//!
//! Deliberately small: shuffled minibatches, decoupled-weight-decay Adam,
//! cosine learning-rate decay per epoch, and an early stop on training
//! accuracy. The loop aborts with a diagnostic instead of continuing past a
//! non-finite loss.

use crate::data::Dataset;
use crate::error::{arg_err, FwError, Result};
use crate::model::{
    cross_entropy, init_params, model_backward_from_dlogits, model_forward, model_forward_cached,
    AdamW, FwNetModel, ModelConfig,
};
use crate::rng::Rng;
use crate::tensor::RealTensor;

/// Loop hyperparameters. [`TrainOptions::default`] matches the CLI defaults.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop once training accuracy reaches this fraction.
    pub stop_acc: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            stop_acc: None,
        }
    }
}

/// Post-epoch training metrics (epoch numbers are 1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FwNetModel,
    pub stats: Vec<EpochStat>,
}

/// Cosine decay over `total` epochs: full `base` at epoch 0, approaching
/// zero on the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    let t = epoch.min(total) as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Class predictions (argmax of the logits, first index on ties).
pub fn predict(model: &FwNetModel, images: &RealTensor) -> Result<Vec<usize>> {
    let logits = model_forward(images, model)?;
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

/// Mean loss and accuracy of `model` over the whole dataset.
pub fn evaluate(model: &FwNetModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if batch_size == 0 {
        arg_err!("batch size must be positive");
    }
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let (batch, labels) = data.gather(&idx)?;
        let logits = model_forward(&batch, model)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss * idx.len() as f64;
        for (p, &l) in predictions_of(&logits).iter().zip(&labels) {
            correct += usize::from(p == &l);
        }
        start += batch_size;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn predictions_of(logits: &RealTensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Train a freshly initialised model on `data`.
///
/// Each epoch reshuffles the dataset with its own stream derived from
/// `seed`, so runs are reproducible end to end. Returns the trained model
/// and one [`EpochStat`] per completed epoch.
pub fn train_toy(
    config: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        arg_err!("cannot train on an empty dataset");
    }
    if data.image_size() != config.image_size {
        arg_err!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            data.image_size(),
            config.image_size
        );
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= config.num_classes) {
        arg_err!("label {bad} out of range for {} classes", config.num_classes);
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        arg_err!("epochs and batch size must be positive");
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) || !(opts.weight_decay.is_finite()) {
        arg_err!("learning rate and weight decay must be finite (lr positive)");
    }

    let mut model = init_params(config, seed)?;
    let mut opt = AdamW::new(&model, opts.lr, (0.9, 0.999), opts.weight_decay);
    let n = data.len();
    let mut stats = Vec::new();

    for epoch in 0..opts.epochs {
        opt.lr = cosine_lr(opts.lr, epoch, opts.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(seed, 1 + epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (batch, labels) = data.gather(chunk)?;
            let (logits, cache) = model_forward_cached(&batch, &model)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(FwError::Numeric(format!(
                    "training diverged: loss {loss} at epoch {}, batch {bi}",
                    epoch + 1
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            for (p, &l) in predictions_of(&logits).iter().zip(&labels) {
                correct += usize::from(p == &l);
            }
            let (grads, _) = model_backward_from_dlogits(&batch, &model, &cache, &dlogits)?;
            opt.step(&mut model, &grads)?;
        }

        let stat = EpochStat {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
        };
        let acc = stat.train_acc;
        stats.push(stat);
        if opts.stop_acc.is_some_and(|target| acc >= target) {
            break;
        }
    }
    Ok(TrainOutcome { model, stats })
}

/// Render per-epoch metrics as CSV.
pub fn metrics_csv(stats: &[EpochStat]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc\n");
    for s in stats {
        out.push_str(&format!("{},{:.6},{:.4}\n", s.epoch, s.train_loss, s.train_acc));
    }
    out
}

// ── Tests ─────────────────────────────────────────────────────────────────
