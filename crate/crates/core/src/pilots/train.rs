use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{adam_update, AdamState, Loss, Mode, Sequential, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: Loss,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 32,
            lr: 1e-3,
            loss: Loss::Mse,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One training example; tensors carry no batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub aux: Option<Tensor>,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Inference-mode loss on the training split before the first update.
    pub initial_train_loss: f64,
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Inference-mode loss on the held-out split per epoch (empty split → empty list).
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub hyper: TrainHyper,
    /// Model configuration echoed by the caller.
    pub model: serde_json::Value,
}

/// Seeded shuffle, then the last `round(n·val_fraction)` indices are held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

fn gather(data: &[Sample], idx: &[usize]) -> Result<(Tensor, Option<Tensor>, Tensor)> {
    let stack = |f: &dyn Fn(&Sample) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<&Tensor> = idx.iter().map(|&i| f(&data[i])).collect();
        Tensor::stack(&parts)
    };
    let x = stack(&|s| &s.input)?;
    let aux = if data[idx[0]].aux.is_some() {
        let parts: Result<Vec<&Tensor>> = idx
            .iter()
            .map(|&i| {
                data[i]
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("sample {i} lacks aux input")))
            })
            .collect();
        Some(Tensor::stack(&parts?)?)
    } else {
        None
    };
    let y = stack(&|s| &s.target)?;
    Ok((x, aux, y))
}

/// Mean inference-mode loss over `idx`, evaluated in chunks of `batch`.
pub fn evaluate_loss(
    net: &Sequential,
    data: &[Sample],
    idx: &[usize],
    loss: Loss,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, aux, y) = gather(data, chunk)?;
        let pred = net.predict(&x, aux.as_ref())?;
        total += loss.evaluate(&pred, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Minibatch Adam training with a seeded split and shuffle.
pub fn train(
    net: &mut Sequential,
    data: &[Sample],
    hyper: &TrainHyper,
    model: serde_json::Value,
) -> Result<TrainReport> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let started = Instant::now();
    let (train_idx, val_idx) = split_indices(data.len(), hyper.val_fraction, hyper.seed);
    if train_idx.is_empty() {
        return Err(Error::Data(
            "validation split leaves no training samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut adam = AdamState::new(net.params(), hyper.lr);
    let initial_train_loss = evaluate_loss(net, data, &train_idx, hyper.loss, hyper.batch)?;
    let mut report = TrainReport {
        initial_train_loss,
        train_loss: Vec::with_capacity(hyper.epochs),
        val_loss: Vec::with_capacity(hyper.epochs),
        epochs_run: 0,
        wall_time_s: 0.0,
        seed: hyper.seed,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        hyper: hyper.clone(),
        model,
    };
    let mut order = train_idx.clone();
    let mut batch_no = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let (x, aux, y) = gather(data, chunk)?;
            let pred = net.forward(&x, aux.as_ref(), Mode::Train, &mut rng)?;
            let (loss, grad) = hyper.loss.evaluate(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    location: format!("batch {batch_no}"),
                    detail: format!("loss {loss}"),
                });
            }
            let (_, grads) = net.backward(&grad, false)?;
            adam_update(&mut net.params_mut(), &grads, &mut adam)?;
            sum += loss * chunk.len() as f64;
            batch_no += 1;
        }
        report.train_loss.push(sum / order.len() as f64);
        if !val_idx.is_empty() {
            report
                .val_loss
                .push(evaluate_loss(net, data, &val_idx, hyper.loss, hyper.batch)?);
        }
        report.epochs_run += 1;
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}
