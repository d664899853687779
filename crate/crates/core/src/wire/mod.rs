//! Weight-wise knowledge transfer between models of different architectures.
//!
//! For every pair of source tap `m` and target tap `n` two one-layer meta
//! networks read the globally pooled source feature: the location unit scores
//! how much `m` should teach `n` (softmax over `n`), the degree unit weights
//! the source channels (softmax scaled by the channel count). An adapter (a
//! learned 1x1 projection after fixed bilinear resampling) maps the target
//! feature into the source feature's shape. The target is trained on
//!
//! ```text
//! l_final = l_ce + sum_(m,n) loc(m,n) * mean(deg_c * (adapter(target_n) - source_m)^2)
//! ```
//!
//! with one joint SGD step per batch over the target weights, adapters and
//! meta networks. The source model is only read.

mod meta;
mod objective;

use serde::Serialize;

pub use meta::{bilinear_matrix, candidate_pairs, MetaNetworkPair, PairUnit};
pub use objective::{
    adapt, degree_loss, location_loss, transfer_degree, transfer_location, transfer_signals,
    wire_objective, LossVariant, ObjectiveTerms, TransferSignals, WireGrads,
};

use rand::seq::SliceRandom;

use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::model::train::Sgd;
use crate::model::{DeviceModel, TrainingHyperparams};
use crate::scalar::Scalar;
use crate::seed;

/// Epoch means of the loss terms. `l_final` is `l_ce + l_location` of the
/// means, so the identity holds exactly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_degree: Vec<f64>,
    pub l_location: f64,
    pub l_ce: f64,
    pub l_final: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WireReport {
    pub epochs: Vec<LossBundle>,
}

impl WireReport {
    pub fn final_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.l_final).collect()
    }
}

/// Result of one transfer: the trained target, the updated meta networks.
#[derive(Clone, Debug)]
pub struct WireOutcome<T> {
    pub target: DeviceModel<T>,
    pub meta: MetaNetworkPair<T>,
    pub report: WireReport,
}

/// Train a copy of `target` to absorb `source`'s knowledge on `public`.
///
/// Runs `epochs` passes over `public` in seeded random order, batches of
/// `hp.batch_size`, one SGD step (learning rate and momentum from `hp`,
/// fresh momentum) per batch over the target weights, adapters and meta
/// networks together.
#[allow(clippy::too_many_arguments)]
pub fn wire_transfer<T: Scalar>(
    source: &DeviceModel<T>,
    target: &DeviceModel<T>,
    meta: &MetaNetworkPair<T>,
    public: &DatasetView<'_>,
    epochs: usize,
    hp: &TrainingHyperparams,
    variant: LossVariant,
    seed: u64,
) -> Result<WireOutcome<T>> {
    if !meta.matches(source.arch(), target.arch()) {
        let (s, t) = meta.direction();
        return Err(Error::ArchMismatch {
            expected: format!("{s}->{t}"),
            actual: format!("{}->{}", source.arch().name, target.arch().name),
        });
    }
    if public.is_empty() {
        return Err(Error::domain("knowledge transfer needs a nonempty public set"));
    }
    let mut target = target.clone();
    let mut meta = meta.clone();
    let mut opt = Sgd::<T>::new(hp.learning_rate, hp.momentum);
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..public.len()).collect();
    let mut report = WireReport::default();
    let n_pairs = meta.units().len();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum_deg = vec![0.0; n_pairs];
        let (mut sum_loc, mut sum_ce) = (0.0, 0.0);
        let mut batches = 0usize;
        for positions in order.chunks(hp.batch_size.max(1)) {
            let (x, labels) = public.batch::<T>(positions);
            let source_taps = if variant.uses_features() {
                source.forward_features(&x)?.taps
            } else {
                Vec::new()
            };
            let (terms, grads) = wire_objective(&source_taps, &target, &meta, &x, &labels, variant)?;
            if !terms.l_final.is_finite() {
                return Err(Error::TransferDivergence { epoch });
            }
            let target_slots = target
                .params_mut()
                .iter_mut()
                .zip(&grads.target)
                .map(|(p, g)| (p.data.as_mut_slice(), g.as_slice()));
            let meta_slots = meta
                .units_mut()
                .iter_mut()
                .zip(&grads.meta)
                .flat_map(|(u, g)| u.params.iter_mut().zip(g).map(|(p, g)| (p.data.as_mut_slice(), g.as_slice())));
            opt.step(target_slots.chain(meta_slots));
            for (a, d) in sum_deg.iter_mut().zip(&terms.l_degree) {
                *a += d.as_f64();
            }
            sum_loc += terms.l_location.as_f64();
            sum_ce += terms.l_ce.as_f64();
            batches += 1;
        }
        if !target.all_finite() {
            return Err(Error::TransferDivergence { epoch });
        }
        let k = batches as f64;
        let (l_location, l_ce) = (sum_loc / k, sum_ce / k);
        report.epochs.push(LossBundle {
            l_degree: sum_deg.into_iter().map(|d| d / k).collect(),
            l_location,
            l_ce,
            l_final: l_ce + l_location,
        });
    }
    Ok(WireOutcome { target, meta, report })
}
