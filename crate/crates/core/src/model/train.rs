//! Device-side training: mini-batch SGD with momentum on cross-entropy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::DeviceModel;
use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{softmax_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            learning_rate: 1e-3,
            momentum: 0.05,
            batch_size: 32,
            local_epochs: 5,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("hp.learning_rate", "must be a finite non-negative number"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config("hp.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hp.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// SGD with classical momentum: `v = momentum * v + g; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr: T::of(lr),
            momentum: T::of(momentum),
            velocity: Vec::new(),
        }
    }

    /// Apply one step to a sequence of (parameter, gradient) slices. The
    /// sequence must have the same layout on every call.
    pub fn step<'a, I>(&mut self, slots: I)
    where
        I: IntoIterator<Item = (&'a mut [T], &'a [T])>,
    {
        for (k, (w, g)) in slots.into_iter().enumerate() {
            if self.velocity.len() <= k {
                self.velocity.push(vec![T::zero(); g.len()]);
            }
            let v = &mut self.velocity[k];
            for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *wi -= self.lr * *vi;
            }
        }
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let b = logits.batch();
    let k = logits.sample_len();
    let inv_b = T::one() / T::of_usize(b);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.sample(n);
        let p = grad.sample_mut(n);
        softmax_into(row, p);
        // NaN must propagate so divergence is detected.
        let py = if p[y] < T::min_positive_value() { T::min_positive_value() } else { p[y] };
        loss -= py.ln();
        p[y] -= T::one();
        for v in p.iter_mut() {
            *v *= inv_b;
        }
    }
    debug_assert_eq!(k, grad.sample_len());
    (loss * inv_b, grad)
}

/// Index of the largest logit (lowest index wins ties).
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train a copy of `model` on `shard` for `hp.local_epochs` epochs.
///
/// Each epoch visits the shard in a fresh random order (drawn from `seed`) in
/// batches of `hp.batch_size`; the last batch may be short.
pub fn local_train<T: Scalar>(
    model: &DeviceModel<T>,
    shard: &DatasetView<'_>,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<(DeviceModel<T>, TrainReport)> {
    if shard.is_empty() {
        return Err(Error::domain("local training on an empty shard"));
    }
    let mut out = model.clone();
    let mut opt = Sgd::new(hp.learning_rate, hp.momentum);
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..hp.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, positions) in order.chunks(hp.batch_size.max(1)).enumerate() {
            let (x, y) = shard.batch::<T>(positions);
            let trace = out.forward_trace(&x)?;
            let (loss, d_logits) = cross_entropy(trace.logits(), &y);
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { epoch, batch });
            }
            let grads = out.backward(&trace, &d_logits, &[]);
            opt.step(
                out.params_mut()
                    .iter_mut()
                    .zip(&grads)
                    .map(|(p, g)| (p.data.as_mut_slice(), g.as_slice())),
            );
            total += loss.as_f64();
            batches += 1;
        }
        report.epoch_loss.push(total / batches as f64);
    }
    if !out.all_finite() {
        return Err(Error::TrainingDivergence {
            epoch: hp.local_epochs.saturating_sub(1),
            batch: 0,
        });
    }
    Ok((out, report))
}

/// Top-1 accuracy on `data`.
pub fn evaluate<T: Scalar>(model: &DeviceModel<T>, data: &DatasetView<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("evaluation on an empty dataset"));
    }
    let mut correct = 0usize;
    for positions in data.chunks(256) {
        let (x, y) = data.batch::<T>(&positions);
        let logits = model.logits(&x)?;
        correct += y
            .iter()
            .enumerate()
            .filter(|(n, &label)| argmax(logits.sample(*n)) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Logits for every sample of `data`, in view order.
pub fn predict<T: Scalar>(model: &DeviceModel<T>, data: &DatasetView<'_>) -> Result<Tensor<T>> {
    let k = model.arch().num_classes;
    let mut all = Vec::with_capacity(data.len() * k);
    for positions in data.chunks(256) {
        let (x, _) = data.batch::<T>(&positions);
        all.extend_from_slice(model.logits(&x)?.data());
    }
    Tensor::from_vec([data.len(), k, 1, 1], all)
}
