//! Materialized experiment: datasets, partition, test split and shard handles.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;

use super::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    dirichlet_partition, load_dataset, sample_public, synthetic, AuditLog, DatasetView, DeviceId,
    LabeledDataset, Partition, Reader, SampleId, ShardHandle,
};
use crate::error::{Error, Result};
use crate::model::ArchitectureSpec;
use crate::seed::{self, stream};

pub fn load_source(source: &DatasetSource) -> Result<LabeledDataset> {
    match source {
        DatasetSource::Path(p) => load_dataset(p),
        DatasetSource::Synthetic(s) => synthetic::prototypes(s.per_class, s.num_classes, s.shape, s.noise, s.seed),
    }
}

/// Device shards (in global tier order) and the public set for `config`.
///
/// The public set comes from `public_dataset` when given, otherwise from the
/// samples no device holds.
pub fn build_partition(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
    public_dataset: Option<&LabeledDataset>,
) -> Result<Partition> {
    let p = &config.partition;
    let mut partition = dirichlet_partition(
        dataset,
        config.total_devices(),
        p.alpha,
        p.samples_per_device,
        seed::derive(config.seed, &[stream::PARTITION]),
    )?;
    let public_seed = seed::derive(config.seed, &[stream::PUBLIC]);
    partition.public = match public_dataset {
        Some(public) => sample_public(public, &HashSet::new(), p.public_size, public_seed)?,
        None => sample_public(dataset, &partition.device_ids(), p.public_size, public_seed)?,
    };
    Ok(partition)
}

/// Everything a run needs besides model state.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: LabeledDataset,
    /// Separate source of the public set, if configured.
    pub public_dataset: Option<LabeledDataset>,
    pub partition: Partition,
    pub test_ids: Vec<SampleId>,
    pub archs: Vec<Arc<ArchitectureSpec>>,
    pub audit: Arc<AuditLog>,
    shards: Vec<Vec<ShardHandle>>,
    test_indices: Vec<usize>,
    public_indices: Vec<usize>,
}

impl Experiment {
    /// Load the configured datasets and partition them.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let dataset = load_source(&config.dataset)?;
        let public_dataset = config.partition.public_dataset.as_ref().map(load_source).transpose()?;
        let partition = build_partition(&config, &dataset, public_dataset.as_ref())?;
        Self::from_parts(config, dataset, public_dataset, partition)
    }

    /// Assemble from an existing partition (validated against the config).
    pub fn from_parts(
        config: ExperimentConfig,
        dataset: LabeledDataset,
        public_dataset: Option<LabeledDataset>,
        partition: Partition,
    ) -> Result<Self> {
        config.validate()?;
        if partition.devices.len() != config.total_devices() {
            return Err(Error::config(
                "tiers",
                format!(
                    "partition has {} device shards but the tiers declare {}",
                    partition.devices.len(),
                    config.total_devices()
                ),
            ));
        }
        let archs = config
            .architectures(dataset.input_shape(), dataset.num_classes())?
            .into_iter()
            .map(Arc::new)
            .collect();
        let public_source = public_dataset.as_ref().unwrap_or(&dataset);
        if public_source.input_shape() != dataset.input_shape() || public_source.num_classes() != dataset.num_classes() {
            return Err(Error::config(
                "partition.public_dataset",
                "public samples must share the device data's shape and classes",
            ));
        }
        let public_indices = public_source.resolve(&partition.public)?;
        let mut held: HashSet<SampleId> = partition.device_ids();
        if public_dataset.is_none() {
            held.extend(partition.public.iter().copied());
        }
        let test_ids = test_split(&dataset, &held, config.partition.test_size, config.seed)?;
        let test_indices = dataset.resolve(&test_ids)?;

        let audit = AuditLog::new();
        let mut shards = Vec::with_capacity(config.tiers.len());
        let mut global = 0;
        for (type_index, tier) in config.tiers.iter().enumerate() {
            let mut handles = Vec::with_capacity(tier.devices);
            for device_index in 0..tier.devices {
                let indices = dataset.resolve(&partition.devices[global])?;
                handles.push(ShardHandle::new(DeviceId { type_index, device_index }, indices, audit.clone()));
                global += 1;
            }
            shards.push(handles);
        }
        Ok(Experiment {
            config,
            dataset,
            public_dataset,
            partition,
            test_ids,
            archs,
            audit,
            shards,
            test_indices,
            public_indices,
        })
    }

    pub fn num_types(&self) -> usize {
        self.archs.len()
    }

    pub fn devices_per_type(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn shard(&self, id: DeviceId) -> &ShardHandle {
        &self.shards[id.type_index][id.device_index]
    }

    /// A device's own data, opened under its identity.
    pub fn device_view(&self, id: DeviceId) -> DatasetView<'_> {
        self.shard(id).open(&self.dataset, Reader::Device(id))
    }

    /// The server-side public set.
    pub fn public_view(&self) -> DatasetView<'_> {
        self.public_dataset
            .as_ref()
            .unwrap_or(&self.dataset)
            .view_of(self.public_indices.clone())
    }

    pub fn test_view(&self) -> DatasetView<'_> {
        self.dataset.view_of(self.test_indices.clone())
    }

    /// Seed for one draw, keyed by stream and coordinates.
    pub fn seed(&self, parts: &[u64]) -> u64 {
        seed::derive(self.config.seed, parts)
    }
}

/// Held-out evaluation ids: everything outside `held`, or a seeded sample of
/// `size` of them. Sorted.
fn test_split(dataset: &LabeledDataset, held: &HashSet<SampleId>, size: usize, base_seed: u64) -> Result<Vec<SampleId>> {
    let pool: Vec<SampleId> = dataset.ids().iter().copied().filter(|id| !held.contains(id)).collect();
    if pool.is_empty() {
        return Err(Error::Capacity { requested: size.max(1), available: 0 });
    }
    if size == 0 || size == pool.len() {
        let mut all = pool;
        all.sort_unstable();
        return Ok(all);
    }
    if size > pool.len() {
        return Err(Error::Capacity { requested: size, available: pool.len() });
    }
    let mut rng = seed::rng(seed::derive(base_seed, &[stream::TEST]));
    let mut picked: Vec<SampleId> = index::sample(&mut rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}
