use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{predict, Metrics};
use super::{class_weights, Adam, TrainConfig, TrainError};
use crate::data::EpochSet;
use crate::model::{LiDsn, Mode};
use crate::numeric::{RngStream, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Excluded from serialisation so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_acc));
        }
        s
    }
}

/// Weighted cross-entropy of eval-mode predictions, with accuracy.
fn validation(model: &LiDsn, set: &EpochSet, weights: &[f64], batch: usize) -> Result<(f64, f64), TrainError> {
    let (preds, logits) = predict(model, set, batch)?;
    let k = set.n_classes();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(&[logits.len(), k], logits.concat())?);
    let loss = tape.weighted_cross_entropy(l, set.labels(), weights)?;
    let acc = Metrics::from_predictions(&preds, set.labels(), k)?.acc;
    Ok((tape.value(loss).item(), acc))
}

/// Mini-batch Adam on `fit`, keeping the parameters with the lowest
/// validation loss seen. The model holds those parameters on return.
pub fn train(model: &mut LiDsn, fit: &EpochSet, val: &EpochSet, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if fit.n_trials() == 0 {
        return Err(TrainError::EmptySet("training"));
    }
    if val.n_trials() == 0 {
        return Err(TrainError::EmptySet("validation"));
    }
    let start = Instant::now();
    let weights = class_weights(fit.labels(), fit.n_classes(), cfg.class_weights)?;
    let sizes: Vec<usize> = model.params.trainable_mut().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.adam(), &sizes);
    let mut order: Vec<usize> = (0..fit.n_trials()).collect();
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        RngStream::named(cfg.seed, "shuffle").fork(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(fit.batch(chunk));
            let rng = RngStream::named(cfg.seed, "dropout").fork(step);
            let mut ctx = model.ctx(&mut tape, Mode::Train, rng, true);
            let logits = ctx.forward(x)?;
            let loss = ctx.tape.weighted_cross_entropy(logits, &fit.labels_of(chunk), &weights)?;
            let bound = ctx.bound();
            let stats = ctx.take_batch_stats();
            drop(ctx);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let zeros: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let gslices: Vec<&[f64]> =
                bound.iter().zip(&zeros).map(|((_, v), z)| grads.get(*v).map_or(z.as_slice(), |g| g.data())).collect();
            let mut slots: Vec<(&str, &mut [f64], &[f64])> = model
                .params
                .trainable_mut()
                .zip(gslices)
                .map(|((name, t), g)| (name, t.data_mut(), g))
                .collect();
            adam.step(&mut slots)?;
            drop(slots);
            model.update_running_stats(&stats, cfg.bn_momentum);
            step += 1;
        }
        let (val_loss, val_acc) = validation(model, val, &weights, cfg.batch_size.max(64))?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        records.push(EpochRecord { epoch, train_loss: loss_sum / fit.n_trials() as f64, val_loss, val_acc });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience && cfg.patience > 0 {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainReport {
        seed: cfg.seed,
        stop_epoch: records.len(),
        epochs: records,
        best_epoch: best.1,
        best_val_loss: best.0,
        stop_reason,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
