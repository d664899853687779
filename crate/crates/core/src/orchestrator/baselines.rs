//! Reference methods: classic FedAvg over one shared architecture, and
//! logit averaging on the public set for heterogeneous tiers.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::records::{mean, RoundRecord};
use super::setup::Experiment;
use super::{evaluate_tiers, stage, train_participants, Federation, Upload};
use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::model::checkpoint::{logit_bytes, model_bytes};
use crate::model::train::Sgd;
use crate::model::{evaluate, predict, DeviceModel, TrainingHyperparams};
use crate::prom::pre_aggregate;
use crate::scalar::Scalar;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

fn empty_record(round: usize) -> RoundRecord {
    RoundRecord {
        round,
        accuracy: Vec::new(),
        mean_accuracy: 0.0,
        fidelity: Vec::new(),
        aggregation_weights: Vec::new(),
        participants: Vec::new(),
        dropped: Vec::new(),
        devices: Vec::new(),
        bytes_down: 0,
        bytes_up: 0,
        bytes_total: 0,
        cumulative_bytes: 0,
        transfers: Vec::new(),
        wire_calls: 0,
    }
}

/// One global model shared by every device; sample-weighted averaging.
#[derive(Clone, Debug)]
pub struct FedAvgState<T> {
    pub model: DeviceModel<T>,
}

impl<T: Scalar> FedAvgState<T> {
    pub fn init(exp: &Experiment) -> Result<Self> {
        if exp.archs.iter().any(|a| a != &exp.archs[0]) {
            return Err(Error::config("tiers", "homogeneous FedAvg needs one architecture for every tier"));
        }
        Ok(FedAvgState {
            model: DeviceModel::instantiate(exp.archs[0].clone(), exp.seed(&[stream::INIT, 0]))?,
        })
    }
}

impl<T: Scalar> Federation<T> for FedAvgState<T> {
    fn run_round(&mut self, exp: &Experiment, round: usize) -> Result<RoundRecord> {
        let download = vec![model_bytes(&self.model); exp.num_types()];
        let trained = train_participants(exp, round, |_| &self.model, &download)?;
        let all: Vec<&Upload<T>> = trained.uploads.iter().flatten().collect();
        if !all.is_empty() {
            let models: Vec<&DeviceModel<T>> = all.iter().map(|u| &u.model).collect();
            let counts: Vec<usize> = all.iter().map(|u| u.samples).collect();
            self.model = stage(round, "aggregate", pre_aggregate(&models, &counts))?;
        }
        let models = vec![self.model.clone(); exp.num_types()];
        let accuracy = stage(round, "evaluate", evaluate_tiers(exp, &models, &trained.uploads))?;
        Ok(RoundRecord {
            accuracy,
            participants: trained.participants,
            dropped: trained.dropped,
            devices: trained.devices,
            ..empty_record(round)
        })
    }
}

/// Persistent per-device models that exchange public-set logits.
///
/// Each round the selected devices train locally, upload their logits on the
/// public set, download the average over all uploads and regress onto it
/// (mean squared error) for `wire_epochs` epochs, matching the transfer budget
/// of the heterogeneous method. Tier accuracy is the mean over the tier's
/// devices.
#[derive(Clone, Debug)]
pub struct DistillationState<T> {
    /// `[type][device]`.
    pub models: Vec<Vec<DeviceModel<T>>>,
}

impl<T: Scalar> DistillationState<T> {
    pub fn init(exp: &Experiment) -> Result<Self> {
        let models = exp
            .archs
            .iter()
            .zip(exp.devices_per_type())
            .enumerate()
            .map(|(i, (arch, k))| {
                let m = DeviceModel::instantiate(arch.clone(), exp.seed(&[stream::INIT, i as u64]))?;
                Ok(vec![m; k])
            })
            .collect::<Result<_>>()?;
        Ok(DistillationState { models })
    }
}

impl<T: Scalar> Federation<T> for DistillationState<T> {
    fn run_round(&mut self, exp: &Experiment, round: usize) -> Result<RoundRecord> {
        let cfg = &exp.config;
        let public = exp.public_view();
        let classes = exp.dataset.num_classes();
        let payload = logit_bytes(public.len(), classes);
        let models = &self.models;
        let mut trained = train_participants(exp, round, |id| &models[id.type_index][id.device_index], &vec![0; exp.num_types()])?;

        let uploads: Vec<&Upload<T>> = trained.uploads.iter().flatten().collect();
        let logits: Vec<Tensor<T>> = uploads
            .par_iter()
            .map(|u| predict(&u.model, &public))
            .collect::<Result<_>>()?;
        for d in trained.devices.iter_mut() {
            let survived = uploads.iter().any(|u| u.device.type_index == d.type_index && u.device.device_index == d.device_index);
            d.bytes_up = if survived { payload } else { 0 };
            d.bytes_down = if survived && !logits.is_empty() { payload } else { 0 };
        }
        if !logits.is_empty() {
            let mut consensus = Tensor::<T>::zeros([public.len(), classes, 1, 1]);
            for l in &logits {
                consensus.add_assign(l);
            }
            let scale = T::of(1.0 / logits.len() as f64);
            consensus.data_mut().iter_mut().for_each(|v| *v *= scale);
            let distilled: Vec<DeviceModel<T>> = uploads
                .par_iter()
                .map(|u| {
                    let seed = exp.seed(&[stream::DISTILL, round as u64, u.device.type_index as u64, u.device.device_index as u64]);
                    let (t, d) = (u.device.type_index, u.device.device_index);
                    // Distillation runs on the device, so divergence drops that
                    // device's update like a failed local round would.
                    match distill(&u.model, &public, &consensus, cfg.wire_epochs, &cfg.hp, seed) {
                        Ok((m, _)) => Ok(m),
                        Err(e @ Error::TrainingDivergence { .. }) => {
                            warn!("round {round}: device {t}/{d} diverged while distilling ({e}); keeping its local model");
                            Ok(u.model.clone())
                        }
                        Err(e) => stage(round, &format!("distill[{t}/{d}]"), Err(e)),
                    }
                })
                .collect::<Result<_>>()?;
            for (u, m) in uploads.iter().zip(distilled) {
                self.models[u.device.type_index][u.device.device_index] = m;
            }
        }

        let test = exp.test_view();
        let accuracy = self
            .models
            .par_iter()
            .map(|tier| {
                let accs = tier.iter().map(|m| evaluate(m, &test)).collect::<Result<Vec<_>>>()?;
                Ok(mean(&accs))
            })
            .collect::<Result<Vec<_>>>();
        let accuracy = stage(round, "evaluate", accuracy)?;
        Ok(RoundRecord {
            accuracy,
            participants: trained.participants,
            dropped: trained.dropped,
            devices: trained.devices,
            ..empty_record(round)
        })
    }
}

/// Regress `model`'s logits on `public` onto `targets` (`[N, K]`, view order)
/// by mean squared error. Returns the model and the mean batch loss per epoch.
pub fn distill<T: Scalar>(
    model: &DeviceModel<T>,
    public: &DatasetView<'_>,
    targets: &Tensor<T>,
    epochs: usize,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<(DeviceModel<T>, Vec<f64>)> {
    let k = model.arch().num_classes;
    if targets.shape() != [public.len(), k, 1, 1] {
        return Err(Error::ShapeMismatch {
            context: "distillation targets".into(),
            expected: vec![public.len(), k, 1, 1],
            actual: targets.shape().to_vec(),
        });
    }
    if public.is_empty() {
        return Err(Error::domain("distillation on an empty public set"));
    }
    let mut out = model.clone();
    let mut opt = Sgd::<T>::new(hp.learning_rate, hp.momentum);
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..public.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (batch, positions) in order.chunks(hp.batch_size.max(1)).enumerate() {
            let (x, _) = public.batch::<T>(positions);
            let trace = out.forward_trace(&x)?;
            let z = trace.logits();
            let scale = T::of(1.0 / (positions.len() * k) as f64);
            let mut d = Tensor::<T>::zeros([positions.len(), k, 1, 1]);
            let mut loss = T::zero();
            for (b, &p) in positions.iter().enumerate() {
                for c in 0..k {
                    let diff = z.sample(b)[c] - targets.sample(p)[c];
                    loss += diff * diff * scale;
                    d.sample_mut(b)[c] = T::of(2.0) * diff * scale;
                }
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { epoch, batch });
            }
            let grads = out.backward(&trace, &d, &[]);
            opt.step(
                out.params_mut()
                    .iter_mut()
                    .zip(&grads)
                    .map(|(p, g)| (p.data.as_mut_slice(), g.as_slice())),
            );
            total += loss.as_f64();
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok((out, losses))
}
