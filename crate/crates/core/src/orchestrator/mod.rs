//! Experiment driver: the federated round loop for the heterogeneous method
//! and the two baselines, metric accounting and run artifacts.
//!
//! A run is a [`Federation`] stepped `config.rounds` times over an
//! [`Experiment`]. Device training happens in parallel, each device on its own
//! model copy and reading only its own shard; every server stage reads only
//! uploaded models and the public set.

pub mod baselines;
pub mod config;
pub mod moss;
pub mod records;
pub mod setup;

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

pub use baselines::{distill, DistillationState, FedAvgState};
pub use config::{
    Ablation, ArchChoice, ConvergenceConfig, DatasetSource, EvalMode, ExperimentConfig, Method, PartitionConfig,
    SyntheticSpec, TierConfig,
};
pub use moss::{MossState, ServerOutcome};
pub use records::{
    detect_convergence, read_records, read_summary, write_atomic, Artifacts, DeviceRound, RoundRecord, RunManifest,
    RunSummary, SeedSet, TransferTrace,
};
pub use setup::{build_partition, load_source, Experiment};

use crate::data::audit::AuditEntry;
use crate::data::{AuditSummary, DeviceId};
use crate::error::{Error, Result};
use crate::model::checkpoint::model_bytes;
use crate::model::{evaluate, local_train, DeviceModel};
use crate::scalar::Scalar;
use crate::seed::{self, stream};

/// One method's server state, advanced a round at a time.
pub trait Federation<T> {
    /// Run round `round`. Byte totals and mean accuracy are filled in by the
    /// caller from the per-device entries.
    fn run_round(&mut self, exp: &Experiment, round: usize) -> Result<RoundRecord>;
}

/// A trained device model as the server receives it.
#[derive(Clone, Debug)]
pub struct Upload<T> {
    pub device: DeviceId,
    pub model: DeviceModel<T>,
    /// Shard size, reported with the upload.
    pub samples: usize,
}

/// Per type, `ceil(fraction * K_i)` device indices drawn without replacement,
/// sorted. Deterministic in `seed`.
pub fn select_participants(devices_per_type: &[usize], fraction: f64, seed: u64) -> Vec<Vec<usize>> {
    devices_per_type
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let count = ((fraction * k as f64 - 1e-9).ceil().max(1.0) as usize).min(k);
            let mut rng = seed::rng(seed::derive(seed, &[i as u64]));
            let mut picked = index::sample(&mut rng, k, count).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Attach the failing stage to an error.
pub(crate) fn stage<R>(round: usize, name: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| Error::Stage {
        round,
        stage: name.to_string(),
        source: Box::new(e),
    })
}

pub(crate) struct Trained<T> {
    pub participants: Vec<Vec<usize>>,
    pub uploads: Vec<Vec<Upload<T>>>,
    pub dropped: Vec<DeviceId>,
    pub devices: Vec<DeviceRound>,
}

/// Select this round's devices and train each from `start(id)` on its own
/// shard, in parallel. Diverging devices are dropped with a warning.
/// `download[i]` is charged to every selected device of type `i`.
pub(crate) fn train_participants<'m, T, F>(exp: &Experiment, round: usize, start: F, download: &[usize]) -> Result<Trained<T>>
where
    T: Scalar,
    F: Fn(DeviceId) -> &'m DeviceModel<T> + Sync,
{
    let cfg = &exp.config;
    let participants = select_participants(
        &exp.devices_per_type(),
        cfg.participation_fraction,
        exp.seed(&[stream::SELECT, round as u64]),
    );
    let jobs: Vec<DeviceId> = participants
        .iter()
        .enumerate()
        .flat_map(|(type_index, devs)| {
            devs.iter().map(move |&device_index| DeviceId { type_index, device_index })
        })
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&id| {
            let shard = exp.device_view(id);
            let seed = exp.seed(&[stream::TRAIN, round as u64, id.type_index as u64, id.device_index as u64]);
            local_train(start(id), &shard, &cfg.hp, seed).map(|r| (r, shard.len()))
        })
        .collect();

    let mut out = Trained {
        participants,
        uploads: (0..exp.num_types()).map(|_| Vec::new()).collect(),
        dropped: Vec::new(),
        devices: Vec::with_capacity(jobs.len()),
    };
    for (id, result) in jobs.into_iter().zip(results) {
        let mut entry = DeviceRound {
            type_index: id.type_index,
            device_index: id.device_index,
            bytes_down: download[id.type_index],
            bytes_up: 0,
            local_loss: Vec::new(),
        };
        match result {
            Ok(((model, report), samples)) => {
                entry.bytes_up = model_bytes(&model);
                entry.local_loss = report.epoch_loss;
                let model = model.with_owner(crate::model::Owner::Device {
                    type_index: id.type_index,
                    device_index: id.device_index,
                });
                out.uploads[id.type_index].push(Upload { device: id, model, samples });
            }
            Err(e) if e.is_divergence() => {
                warn!("round {round}: device {}/{} dropped: {e}", id.type_index, id.device_index);
                out.dropped.push(id);
            }
            Err(e) => return stage(round, &format!("local_train[{}/{}]", id.type_index, id.device_index), Err(e)),
        }
        out.devices.push(entry);
    }
    Ok(out)
}

/// Test accuracy per tier: of the tier's broadcast model, or in per-device
/// mode the mean over this round's locally trained models.
pub(crate) fn evaluate_tiers<T: Scalar>(exp: &Experiment, models: &[DeviceModel<T>], uploads: &[Vec<Upload<T>>]) -> Result<Vec<f64>> {
    let test = exp.test_view();
    (0..models.len())
        .into_par_iter()
        .map(|i| match exp.config.evaluation {
            config::EvalMode::PerDevice if !uploads[i].is_empty() => {
                let accs = uploads[i].iter().map(|u| evaluate(&u.model, &test)).collect::<Result<Vec<_>>>()?;
                Ok(records::mean(&accs))
            }
            _ => evaluate(&models[i], &test),
        })
        .collect()
}

/// The configured method's initial state.
pub fn federation<T: Scalar>(exp: &Experiment) -> Result<Box<dyn Federation<T>>> {
    Ok(match exp.config.method {
        Method::Moss => Box::new(MossState::<T>::init(exp)?),
        Method::FedavgHomogeneous => Box::new(FedAvgState::<T>::init(exp)?),
        Method::LogitDistillation => Box::new(DistillationState::<T>::init(exp)?),
    })
}

/// Run every configured round, handing each finished record to `on_round`.
pub fn simulate<T: Scalar>(exp: &Experiment, mut on_round: impl FnMut(&RoundRecord) -> Result<()>) -> Result<Vec<RoundRecord>> {
    let mut fed = federation::<T>(exp)?;
    let mut records = Vec::with_capacity(exp.config.rounds);
    let mut cumulative = 0;
    for round in 0..exp.config.rounds {
        let mut record = fed.run_round(exp, round)?;
        record.tally(cumulative);
        cumulative = record.cumulative_bytes;
        info!(
            "round {round}: accuracy {:?}, {} bytes",
            record.accuracy, record.bytes_total
        );
        on_round(&record)?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Serialize)]
struct AuditReport {
    summary: AuditSummary,
    entries: Vec<AuditEntry>,
}

fn pretty<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Run `config` and persist manifest, partition, round records, summary and
/// the shard access log under `out_dir`. Records are rewritten after every
/// round, so an aborted run keeps the rounds it finished.
pub fn run_experiment<T: Scalar>(config: ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let exp = Experiment::prepare(config)?;
    let artifacts = Artifacts::in_dir(out_dir);
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: exp.config.clone(),
        seeds: SeedSet {
            base: exp.config.seed,
            partition: exp.seed(&[stream::PARTITION]),
            public: exp.seed(&[stream::PUBLIC]),
            test: exp.seed(&[stream::TEST]),
        },
        artifacts: artifacts.clone(),
        started_at: records::unix_now(),
        finished_at: None,
    };
    write_atomic(&artifacts.manifest, &pretty(&manifest)?)?;
    write_atomic(&artifacts.partition, exp.partition.to_json()?.as_bytes())?;
    write_atomic(&artifacts.rounds, b"")?;

    let mut lines = String::new();
    let result = simulate::<T>(&exp, |record| {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
        write_atomic(&artifacts.rounds, lines.as_bytes())
    });
    let audit = exp.audit.summary();
    write_atomic(
        &artifacts.audit,
        &pretty(&AuditReport {
            summary: audit,
            entries: exp.audit.entries(),
        })?,
    )?;
    let records = result?;
    if audit.server_reads > 0 {
        warn!("{} server-side reads of device shards", audit.server_reads);
    }
    let tiers = exp.archs.iter().map(|a| a.name.clone()).collect();
    let summary = RunSummary::from_records(&exp.config, tiers, &records, audit);
    write_atomic(&artifacts.summary, &pretty(&summary)?)?;
    manifest.finished_at = Some(records::unix_now());
    write_atomic(&artifacts.manifest, &pretty(&manifest)?)?;
    Ok(summary)
}
