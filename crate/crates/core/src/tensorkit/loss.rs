use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy logarithm.
const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl Loss {
    pub fn evaluate(self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            Loss::Mse => mse_loss(pred, target),
            Loss::CrossEntropy => cross_entropy(pred, target),
        }
    }

    /// `L(a) − L(b)` summed per element, so nearby predictions do not cancel
    /// at the magnitude of the loss itself.
    pub fn difference(self, a: &Tensor, b: &Tensor, target: &Tensor) -> Result<f64> {
        if a.shape() != target.shape() || b.shape() != target.shape() {
            return Err(Error::shape(target.shape(), (a.shape(), b.shape())));
        }
        let triples = a.data().iter().zip(b.data()).zip(target.data());
        Ok(match self {
            Loss::Mse => {
                triples
                    .map(|((x, y), t)| (x - y) * (x + y - 2.0 * t))
                    .sum::<f64>()
                    / a.len() as f64
            }
            Loss::CrossEntropy => {
                let rows = a.shape()[0] as f64;
                triples
                    .filter(|(_, t)| **t != 0.0)
                    .map(|((x, y), t)| {
                        let (x, y) = (x.max(CE_FLOOR), y.max(CE_FLOOR));
                        -t * ((x - y) / y).ln_1p()
                    })
                    .sum::<f64>()
                    / rows
            }
        })
    }
}

/// Mean squared error over all elements and its gradient `2(pred − target)/n`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let e = p - t;
        sum += e * e;
        *g = 2.0 * e / n;
    }
    Ok((sum / n, grad))
}

/// Cross-entropy of probability rows `[N, K]` against target distributions,
/// averaged over rows.
pub fn cross_entropy(probs: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if probs.shape() != target.shape() || probs.shape().len() != 2 {
        return Err(Error::shape(target.shape(), probs.shape()));
    }
    let rows = probs.shape()[0] as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad
        .data_mut()
        .iter_mut()
        .zip(probs.data())
        .zip(target.data())
    {
        if *t != 0.0 {
            let pc = p.max(CE_FLOOR);
            sum -= t * pc.ln();
            *g = -t / (pc * rows);
        }
    }
    Ok((sum / rows, grad))
}

/// One-hot rows for class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::range("class label", l));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}
