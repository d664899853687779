//! Non-IID device shards and the disjoint server-side public set.
//!
//! Draw order for [`dirichlet_partition`] (reproducible from the seed alone):
//!
//! 1. One ChaCha8 stream is seeded with `seed`.
//! 2. Class pools hold the ids of each class in dataset order; pools are
//!    shuffled in ascending class order.
//! 3. For each device in order: one `Gamma(alpha, 1)` draw per class in
//!    ascending class order, normalized into class proportions. The shard size
//!    is apportioned over classes by largest remainder (ties go to the lower
//!    class index). A class that cannot cover its share is capped at what
//!    remains and the deficit is re-apportioned over classes with spare
//!    samples, proportionally to the device's proportions (or to spare
//!    capacity if those proportions are all zero), until the shard is full.
//! 4. Each class contributes its next `count` ids from the front of its pool.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, SampleId};
use crate::error::{Error, Result};
use crate::seed;

/// Device shards plus the public set, all as sample ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Dirichlet concentration; `null` for group-based partitions.
    pub alpha: Option<f64>,
    pub devices: Vec<Vec<SampleId>>,
    pub public: Vec<SampleId>,
    pub seed: u64,
}

impl Partition {
    pub fn device_ids(&self) -> HashSet<SampleId> {
        self.devices.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Check the structural invariants: every id exists, shards are pairwise
    /// disjoint, the public set is disjoint from every shard and, when given,
    /// every shard has exactly `samples_per_device` ids.
    pub fn validate(
        &self,
        dataset: &LabeledDataset,
        samples_per_device: Option<usize>,
    ) -> Result<()> {
        let mut seen = HashSet::new();
        for (d, shard) in self.devices.iter().enumerate() {
            if let Some(n) = samples_per_device {
                if shard.len() != n {
                    return Err(Error::domain(format!(
                        "device {d} holds {} samples, expected {n}",
                        shard.len()
                    )));
                }
            }
            for &id in shard {
                dataset.resolve(&[id])?;
                if !seen.insert(id) {
                    return Err(Error::domain(format!("sample {id} assigned twice")));
                }
            }
        }
        let mut public_seen = HashSet::new();
        for &id in &self.public {
            dataset.resolve(&[id])?;
            if seen.contains(&id) {
                return Err(Error::domain(format!(
                    "public sample {id} overlaps a device shard"
                )));
            }
            if !public_seen.insert(id) {
                return Err(Error::domain(format!("public sample {id} listed twice")));
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` units by nonnegative `weights`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps lower class indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Per-class counts for one shard, honoring what is left in each class.
fn apportion(proportions: &[f64], total: usize, available: &[usize]) -> Vec<usize> {
    let mut counts = largest_remainder(proportions, total);
    loop {
        let mut deficit = 0;
        for (c, n) in counts.iter_mut().enumerate() {
            if *n > available[c] {
                deficit += *n - available[c];
                *n = available[c];
            }
        }
        if deficit == 0 {
            return counts;
        }
        let spare: Vec<usize> = available
            .iter()
            .zip(&counts)
            .map(|(a, n)| a - n)
            .collect();
        let mut weights: Vec<f64> = proportions
            .iter()
            .zip(&spare)
            .map(|(&p, &s)| if s > 0 { p } else { 0.0 })
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = spare.iter().map(|&s| s as f64).collect();
        }
        for (n, extra) in counts.iter_mut().zip(largest_remainder(&weights, deficit)) {
            *n += extra;
        }
    }
}

/// Draw one non-IID shard per device with Dirichlet(`alpha`) class proportions.
///
/// The returned partition has an empty public set; see [`sample_public`].
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    n_devices: usize,
    alpha: f64,
    samples_per_device: usize,
    seed: u64,
) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!(
            "Dirichlet alpha must be positive and finite, got {alpha}"
        )));
    }
    let requested = n_devices * samples_per_device;
    if requested > dataset.len() {
        return Err(Error::Capacity {
            requested,
            available: dataset.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let classes = dataset.num_classes();
    let mut pools: Vec<Vec<SampleId>> = vec![Vec::new(); classes];
    for (&id, &label) in dataset.ids().iter().zip(dataset.labels()) {
        pools[label].push(id);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; classes];
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::domain(e.to_string()))?;

    let mut devices = Vec::with_capacity(n_devices);
    for _ in 0..n_devices {
        let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = draws.iter().sum();
        let proportions: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|g| g / sum).collect()
        } else {
            // Every draw underflowed; fall back to spare capacity.
            vec![0.0; classes]
        };
        let available: Vec<usize> = pools
            .iter()
            .zip(&cursor)
            .map(|(p, &c)| p.len() - c)
            .collect();
        let counts = apportion(&proportions, samples_per_device, &available);
        let mut shard = Vec::with_capacity(samples_per_device);
        for (c, &n) in counts.iter().enumerate() {
            shard.extend_from_slice(&pools[c][cursor[c]..cursor[c] + n]);
            cursor[c] += n;
        }
        devices.push(shard);
    }
    Ok(Partition {
        alpha: Some(alpha),
        devices,
        public: Vec::new(),
        seed,
    })
}

/// Uniformly sample `size` ids (without replacement) from the ids not in
/// `exclude`. The result is sorted.
pub fn sample_public(
    dataset: &LabeledDataset,
    exclude: &HashSet<SampleId>,
    size: usize,
    seed: u64,
) -> Result<Vec<SampleId>> {
    let pool: Vec<SampleId> = dataset
        .ids()
        .iter()
        .copied()
        .filter(|id| !exclude.contains(id))
        .collect();
    if size > pool.len() {
        return Err(Error::Capacity {
            requested: size,
            available: pool.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut picked: Vec<SampleId> = rand::seq::index::sample(&mut rng, pool.len(), size)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Draw each device's shard uniformly from its assigned group.
///
/// `group_key[i]` tags sample `i`; `assignment[d]` names device `d`'s group.
/// Shards are disjoint: devices sharing a group draw from one shuffled pool.
pub fn group_partition(
    dataset: &LabeledDataset,
    group_key: &[String],
    assignment: &[String],
    samples_per_device: usize,
    seed: u64,
) -> Result<Partition> {
    if group_key.len() != dataset.len() {
        return Err(Error::domain(format!(
            "{} group tags for {} samples",
            group_key.len(),
            dataset.len()
        )));
    }
    let mut pools: BTreeMap<&str, Vec<SampleId>> = BTreeMap::new();
    for (&id, g) in dataset.ids().iter().zip(group_key) {
        pools.entry(g.as_str()).or_default().push(id);
    }
    if let Some(unknown) = assignment.iter().find(|g| !pools.contains_key(g.as_str())) {
        return Err(Error::domain(format!("unknown group `{unknown}`")));
    }
    let mut rng = seed::rng(seed);
    for pool in pools.values_mut() {
        pool.shuffle(&mut rng);
    }
    let mut cursor: BTreeMap<&str, usize> = pools.keys().map(|&k| (k, 0)).collect();
    let mut devices = Vec::with_capacity(assignment.len());
    for g in assignment {
        let pool = &pools[g.as_str()];
        let at = cursor.get_mut(g.as_str()).expect("cursor per group");
        if *at + samples_per_device > pool.len() {
            return Err(Error::Capacity {
                requested: samples_per_device,
                available: pool.len() - *at,
            });
        }
        devices.push(pool[*at..*at + samples_per_device].to_vec());
        *at += samples_per_device;
    }
    Ok(Partition {
        alpha: None,
        devices,
        public: Vec::new(),
        seed,
    })
}

/// Shannon entropy (bits) of a shard's label histogram.
pub fn label_entropy_bits(dataset: &LabeledDataset, shard: &[SampleId]) -> Result<f64> {
    let mut hist = vec![0usize; dataset.num_classes()];
    for row in dataset.resolve(shard)? {
        hist[dataset.labels()[row]] += 1;
    }
    let n = shard.len() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}
