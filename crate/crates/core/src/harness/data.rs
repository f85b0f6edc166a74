use crate::error::{Error, Result};
use crate::loss::one_hot;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample_shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub source: String,
}

/// One mini-batch. The inputs go to segment A, the targets to the label holder.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// One-hot rows of `labels`.
    pub targets: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size.max(1)
    }

    /// Reinterprets every sample under `shape` (same element count).
    pub fn reshape_samples(&self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        let inputs = self.inputs.reshape(&full).map_err(|_| {
            Error::Dataset(format!(
                "samples of shape {:?} do not fit a {shape:?} input",
                self.sample_shape()
            ))
        })?;
        Ok(Dataset { inputs, ..self.clone() })
    }

    /// Batch used at 0-based global step `step`: consecutive, non-overlapping
    /// slices, wrapping at each epoch and dropping the last partial batch.
    pub fn step_batch(&self, step: usize, batch_size: usize) -> Result<Batch> {
        let per_epoch = self.steps_per_epoch(batch_size);
        if per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "dataset of {} samples cannot fill a batch of {batch_size}",
                self.len()
            )));
        }
        let start = (step % per_epoch) * batch_size;
        let labels = self.labels[start..start + batch_size].to_vec();
        Ok(Batch {
            inputs: self.inputs.slice_batch(start, batch_size)?,
            targets: one_hot(&labels, self.n_classes)?,
            labels,
        })
    }
}

/// Gaussian class blobs: class `k` has mean `μ_k` and unit covariance.
///
/// Recipe (all draws from one `Rng::new(seed)` stream, in this order):
/// 1. For each class, draw `μ_k` with i.i.d. `N(0, separation²)` components,
///    redrawing it until it is at least `separation` away from all earlier means.
/// 2. Sample `i` gets label `i mod n_classes` and input `μ_label + N(0, I)`.
pub fn gen_synthetic(seed: u64, n: usize, shape: &[usize], n_classes: usize) -> Result<Dataset> {
    gen_synthetic_with(seed, n, shape, n_classes, 6.0)
}

pub fn gen_synthetic_with(
    seed: u64,
    n: usize,
    shape: &[usize],
    n_classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Dataset(format!("need at least two classes, got {n_classes}")));
    }
    if n == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::Dataset(format!("degenerate dataset: n = {n}, shape {shape:?}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Dataset(format!("separation must be positive, got {separation}")));
    }
    let dim: usize = shape.iter().product();
    let mut rng = Rng::new(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let mut tries = 0;
        loop {
            let mu: Vec<f64> = (0..dim).map(|_| separation * rng.normal()).collect();
            let far = means.iter().all(|m| {
                m.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
            });
            if far {
                means.push(mu);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Dataset(format!("could not place class {k} mean")));
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        data.extend(means[l].iter().map(|m| m + rng.normal()));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Ok(Dataset {
        inputs: Tensor::new(full, data)?,
        labels,
        n_classes,
        source: format!("synthetic(seed={seed}, n={n}, classes={n_classes}, separation={separation})"),
    })
}
