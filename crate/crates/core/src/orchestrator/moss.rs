//! The heterogeneous round: local training, per-type pre-aggregation, transfer
//! into proxies, fidelity-weighted merging and transfer back.

use std::sync::Arc;

use rayon::prelude::*;

use super::records::{RoundRecord, TransferTrace};
use super::setup::Experiment;
use super::{evaluate_tiers, stage, train_participants, Federation, Upload};
use crate::data::DatasetView;
use crate::error::Result;
use crate::fidelity::{aggregate, fidelity};
use crate::model::checkpoint::model_bytes;
use crate::model::{ArchitectureSpec, DeviceModel, Owner};
use crate::prom::{choose_proxy_architecture, pre_aggregate, weighted_average, ProxyModel, ProxyRole};
use crate::scalar::Scalar;
use crate::seed::stream;
use crate::wire::{wire_transfer, MetaNetworkPair, WireOutcome};

const FORWARD: u64 = 0;
const BACKWARD: u64 = 1;
const DIRECT: u64 = 2;

/// Server-side state carried between rounds.
#[derive(Clone, Debug)]
pub struct MossState<T> {
    /// Latest model per type; what devices download.
    pub models: Vec<DeviceModel<T>>,
    /// Per-type proxies.
    pub proxies: Vec<ProxyModel<T>>,
    pub global_proxy: Option<ProxyModel<T>>,
    /// Type model into proxy, per type.
    pub forward_meta: Vec<MetaNetworkPair<T>>,
    /// Global proxy into type model, per type.
    pub backward_meta: Vec<MetaNetworkPair<T>>,
    /// `[source][target]` type-to-type networks, only without proxies.
    pub direct_meta: Vec<Vec<MetaNetworkPair<T>>>,
    pub proxy_arch: Arc<ArchitectureSpec>,
}

/// What the server step produced, besides the updated state.
#[derive(Clone, Debug, Default)]
pub struct ServerOutcome {
    pub fidelity: Vec<f64>,
    pub weights: Vec<f64>,
    pub transfers: Vec<TransferTrace>,
    pub wire_calls: usize,
}

impl<T: Scalar> MossState<T> {
    pub fn init(exp: &Experiment) -> Result<Self> {
        let specs: Vec<ArchitectureSpec> = exp.archs.iter().map(|a| (**a).clone()).collect();
        let proxy_spec = choose_proxy_architecture(&specs).expect("at least one tier");
        let proxy_arch = exp
            .archs
            .iter()
            .find(|a| a.as_ref() == proxy_spec)
            .expect("chosen among the tiers")
            .clone();
        let models = exp
            .archs
            .iter()
            .enumerate()
            .map(|(i, a)| DeviceModel::instantiate(a.clone(), exp.seed(&[stream::INIT, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        // Every proxy starts from the same weights.
        let proxy = DeviceModel::instantiate(proxy_arch.clone(), exp.seed(&[stream::PROXY]))?;
        let proxies = (0..models.len())
            .map(|i| ProxyModel::new(proxy.clone(), ProxyRole::Type(i)))
            .collect();
        let mut state = MossState {
            models,
            proxies,
            global_proxy: None,
            forward_meta: Vec::new(),
            backward_meta: Vec::new(),
            direct_meta: Vec::new(),
            proxy_arch,
        };
        state.init_meta(exp, None)?;
        Ok(state)
    }

    /// Fresh meta networks; `round` salts the seeds when re-initializing.
    fn init_meta(&mut self, exp: &Experiment, round: Option<usize>) -> Result<()> {
        let salt = |parts: &[u64]| {
            let mut p = vec![stream::META];
            p.extend_from_slice(parts);
            if let Some(t) = round {
                p.push(t as u64 + 1);
            }
            exp.seed(&p)
        };
        let n = exp.num_types();
        if exp.config.ablation.no_prom {
            self.direct_meta = (0..n)
                .map(|j| {
                    (0..n)
                        .map(|i| MetaNetworkPair::new(&exp.archs[j], &exp.archs[i], salt(&[DIRECT, j as u64, i as u64])))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
        } else {
            self.forward_meta = (0..n)
                .map(|i| MetaNetworkPair::new(&exp.archs[i], &self.proxy_arch, salt(&[FORWARD, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            self.backward_meta = (0..n)
                .map(|i| MetaNetworkPair::new(&self.proxy_arch, &exp.archs[i], salt(&[BACKWARD, i as u64])))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    /// Pre-aggregate the uploads and run the server pipeline, replacing
    /// `self.models`. A type without uploads keeps its previous model as its
    /// pre-aggregate.
    pub fn server_aggregate(&mut self, exp: &Experiment, uploads: &[Vec<Upload<T>>], round: usize) -> Result<ServerOutcome> {
        if exp.config.ablation.reinit_meta {
            stage(round, "meta_init", self.init_meta(exp, Some(round)))?;
        }
        let pre: Vec<DeviceModel<T>> = uploads
            .iter()
            .enumerate()
            .map(|(i, ups)| {
                if ups.is_empty() {
                    return Ok(self.models[i].clone());
                }
                let models: Vec<&DeviceModel<T>> = ups.iter().map(|u| &u.model).collect();
                let counts: Vec<usize> = ups.iter().map(|u| u.samples).collect();
                stage(round, &format!("pre_aggregate[{i}]"), pre_aggregate(&models, &counts))
            })
            .collect::<Result<_>>()?;
        let public = exp.public_view();
        if exp.config.ablation.no_prom {
            self.direct_round(exp, &pre, &public, round)
        } else {
            self.proxy_round(exp, &pre, &public, round)
        }
    }

    fn proxy_round(
        &mut self,
        exp: &Experiment,
        pre: &[DeviceModel<T>],
        public: &DatasetView<'_>,
        round: usize,
    ) -> Result<ServerOutcome> {
        let cfg = &exp.config;
        let n = pre.len();
        let mut outcome = ServerOutcome::default();

        let forward: Vec<WireOutcome<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let r = wire_transfer(
                    &pre[i],
                    &self.proxies[i].model,
                    &self.forward_meta[i],
                    public,
                    cfg.wire_epochs,
                    &cfg.hp,
                    cfg.ablation.loss_variant,
                    exp.seed(&[stream::WIRE, round as u64, FORWARD, i as u64]),
                );
                stage(round, &format!("wire_forward[{i}]"), r)
            })
            .collect::<Result<_>>()?;
        outcome.wire_calls += n;
        for (i, out) in forward.into_iter().enumerate() {
            outcome.transfers.push(trace("forward", &pre[i], &out));
            self.proxies[i] = ProxyModel::new(out.target, ProxyRole::Type(i));
            self.forward_meta[i] = out.meta;
        }

        outcome.fidelity = (0..n)
            .map(|i| {
                let f = fidelity(i, &pre[i], &self.proxies[i].model, public).map(|s| s.value);
                stage(round, &format!("fidelity[{i}]"), f)
            })
            .collect::<Result<_>>()?;
        let proxies: Vec<&DeviceModel<T>> = self.proxies.iter().map(|p| &p.model).collect();
        let (global, weights) = stage(
            round,
            "aggregate",
            aggregate(&proxies, &outcome.fidelity, cfg.fidelity_exponent, cfg.ablation.no_file),
        )?;
        outcome.weights = weights;
        let global = ProxyModel::new(global, ProxyRole::Global);

        let backward: Vec<WireOutcome<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let r = wire_transfer(
                    &global.model,
                    &pre[i],
                    &self.backward_meta[i],
                    public,
                    cfg.wire_epochs,
                    &cfg.hp,
                    cfg.ablation.loss_variant,
                    exp.seed(&[stream::WIRE, round as u64, BACKWARD, i as u64]),
                );
                stage(round, &format!("wire_backward[{i}]"), r)
            })
            .collect::<Result<_>>()?;
        outcome.wire_calls += n;
        for (i, out) in backward.into_iter().enumerate() {
            outcome.transfers.push(trace("backward", &global.model, &out));
            self.models[i] = out.target.with_owner(Owner::Unassigned);
            self.backward_meta[i] = out.meta;
        }
        if cfg.sync_proxies {
            for (i, p) in self.proxies.iter_mut().enumerate() {
                *p = ProxyModel::new(global.model.clone(), ProxyRole::Type(i));
            }
        }
        self.global_proxy = Some(global);
        Ok(outcome)
    }

    /// Without proxies: every type's pre-aggregate is transferred into every
    /// architecture (itself included), and the results are averaged.
    fn direct_round(
        &mut self,
        exp: &Experiment,
        pre: &[DeviceModel<T>],
        public: &DatasetView<'_>,
        round: usize,
    ) -> Result<ServerOutcome> {
        let cfg = &exp.config;
        let n = pre.len();
        let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (j, i))).collect();
        let outs: Vec<WireOutcome<T>> = jobs
            .par_iter()
            .map(|&(j, i)| {
                let r = wire_transfer(
                    &pre[j],
                    &pre[i],
                    &self.direct_meta[j][i],
                    public,
                    cfg.wire_epochs,
                    &cfg.hp,
                    cfg.ablation.loss_variant,
                    exp.seed(&[stream::WIRE, round as u64, DIRECT, j as u64, i as u64]),
                );
                stage(round, &format!("wire_direct[{j}->{i}]"), r)
            })
            .collect::<Result<_>>()?;
        let mut outcome = ServerOutcome {
            wire_calls: jobs.len(),
            ..Default::default()
        };
        let mut merged: Vec<Vec<DeviceModel<T>>> = vec![Vec::new(); n];
        for (&(j, i), out) in jobs.iter().zip(outs) {
            outcome.transfers.push(trace("direct", &pre[j], &out));
            self.direct_meta[j][i] = out.meta;
            merged[i].push(out.target);
        }
        for (i, group) in merged.iter().enumerate() {
            let refs: Vec<&DeviceModel<T>> = group.iter().collect();
            let avg = weighted_average(&refs, &vec![1.0 / refs.len() as f64; refs.len()]);
            self.models[i] = stage(round, &format!("average[{i}]"), avg)?.with_owner(Owner::Unassigned);
        }
        Ok(outcome)
    }
}

fn trace<T: Scalar>(stage: &str, source: &DeviceModel<T>, out: &WireOutcome<T>) -> TransferTrace {
    let epochs = &out.report.epochs;
    TransferTrace {
        stage: stage.into(),
        source: source.arch().name.clone(),
        target: out.target.arch().name.clone(),
        l_final: epochs.iter().map(|e| e.l_final).collect(),
        l_ce: epochs.iter().map(|e| e.l_ce).collect(),
        l_location: epochs.iter().map(|e| e.l_location).collect(),
    }
}

impl<T: Scalar> Federation<T> for MossState<T> {
    fn run_round(&mut self, exp: &Experiment, round: usize) -> Result<RoundRecord> {
        let download: Vec<usize> = self.models.iter().map(model_bytes).collect();
        let trained = train_participants(exp, round, |id| &self.models[id.type_index], &download)?;
        let outcome = self.server_aggregate(exp, &trained.uploads, round)?;
        let accuracy = stage(
            round,
            "evaluate",
            evaluate_tiers(exp, &self.models, &trained.uploads),
        )?;
        Ok(RoundRecord {
            round,
            accuracy,
            mean_accuracy: 0.0,
            fidelity: outcome.fidelity,
            aggregation_weights: outcome.weights,
            participants: trained.participants,
            dropped: trained.dropped,
            devices: trained.devices,
            bytes_down: 0,
            bytes_up: 0,
            bytes_total: 0,
            cumulative_bytes: 0,
            transfers: outcome.transfers,
            wire_calls: outcome.wire_calls,
        })
    }
}
