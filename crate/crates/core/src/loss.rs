use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/(2B) * sum((p - t)^2)`
    Mse,
    /// `-1/B * sum(t * ln p)` over probability rows.
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Plan(format!("unknown loss `{other}`"))),
        }
    }
}

const PROB_TOL: f64 = 1e-6;

/// Mean-over-batch loss and its exact gradient w.r.t. `prediction`.
pub fn loss_and_grad(kind: LossKind, prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if prediction.shape() != target.shape() {
        return Err(Error::dim("loss", prediction.shape(), target.shape()));
    }
    let batch = prediction.batch() as f64;
    match kind {
        LossKind::Mse => {
            let resid = prediction.sub(target)?;
            let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / (2.0 * batch);
            Ok((loss, resid.scale(1.0 / batch)))
        }
        LossKind::CrossEntropy => {
            if prediction.rank() != 2 {
                return Err(Error::Loss(format!(
                    "cross-entropy needs (batch, classes) predictions, got {:?}",
                    prediction.shape()
                )));
            }
            let c = prediction.shape()[1];
            for row in prediction.data().chunks(c) {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > PROB_TOL {
                    return Err(Error::Loss(format!(
                        "cross-entropy prediction row is not a probability vector: {row:?}"
                    )));
                }
            }
            let mut loss = 0.0;
            let mut grad = vec![0.0; prediction.len()];
            for ((g, &p), &t) in grad.iter_mut().zip(prediction.data()).zip(target.data()) {
                if t != 0.0 {
                    let p = p.max(f64::MIN_POSITIVE);
                    loss -= t * p.ln();
                    *g = -t / (p * batch);
                }
            }
            Ok((loss / batch, Tensor::new(prediction.shape().to_vec(), grad)?))
        }
    }
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Dataset(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(prediction: &Tensor, labels: &[usize]) -> f64 {
    let c = *prediction.shape().last().unwrap_or(&1);
    let hits = prediction
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
