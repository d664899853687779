//! Partitioning: reference-sampler fixture, size and disjointness contracts,
//! statistical sanity of the non-IID split.

use std::collections::HashSet;

use hetfl::data::{
    dirichlet_partition, group_partition, label_entropy_bits, load_dataset, sample_public,
    save_dataset, synthetic, LabeledDataset, Partition,
};
use hetfl::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

fn cycling(n: usize, classes: usize) -> LabeledDataset {
    synthetic::labels_only((0..n).map(|i| i % classes).collect(), classes).unwrap()
}

// --- independent reference sampler ------------------------------------------
//
// Follows the documented draw order step by step: shuffle class pools in
// ascending class order, then per device one Gamma(alpha, 1) per class,
// normalize, apportion by largest remainder, cap exhausted classes and
// re-apportion the deficit, take ids from the front of each pool.

fn reference_round(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut taken = vec![false; quotas.len()];
    while left > 0 {
        let mut best: Option<usize> = None;
        for c in 0..quotas.len() {
            if taken[c] {
                continue;
            }
            let r = quotas[c] - quotas[c].floor();
            match best {
                Some(b) if quotas[b] - quotas[b].floor() >= r => {}
                _ => best = Some(c),
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        counts[b] += 1;
        left -= 1;
    }
    counts
}

fn reference_weights_round(weights: &[f64], total: usize) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / s * total as f64).collect();
    reference_round(&quotas, total)
}

fn reference_sampler(ds: &LabeledDataset, devices: usize, alpha: f64, per: usize, seed: u64) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ds.num_classes();
    let mut pools: Vec<Vec<u64>> = (0..k)
        .map(|c| ds.ids().iter().zip(ds.labels()).filter(|(_, &l)| l == c).map(|(&i, _)| i).collect())
        .collect();
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut out = Vec::new();
    for _ in 0..devices {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = g.iter().sum();
        let props: Vec<f64> = g.iter().map(|x| x / s).collect();
        let mut want = reference_weights_round(&props, per);
        loop {
            let mut deficit = 0;
            for c in 0..k {
                if want[c] > pools[c].len() {
                    deficit += want[c] - pools[c].len();
                    want[c] = pools[c].len();
                }
            }
            if deficit == 0 {
                break;
            }
            let mut w: Vec<f64> = (0..k).map(|c| if pools[c].len() > want[c] { props[c] } else { 0.0 }).collect();
            if w.iter().sum::<f64>() <= 0.0 {
                w = (0..k).map(|c| (pools[c].len() - want[c]) as f64).collect();
            }
            for (c, e) in reference_weights_round(&w, deficit).into_iter().enumerate() {
                want[c] += e;
            }
        }
        let mut shard = Vec::new();
        for c in 0..k {
            shard.extend(pools[c].drain(..want[c]));
        }
        out.push(shard);
    }
    out
}

const FIXTURE: &str = include_str!("fixtures/dirichlet_seed7.json");

#[test]
fn dirichlet_partition_matches_reference_sampler_and_frozen_fixture() {
    // 30 samples per class: several draws at alpha=0.1 exhaust a class.
    let ds = cycling(300, 10);
    let reference = reference_sampler(&ds, 4, 0.1, 50, 7);
    let frozen: Vec<Vec<u64>> = serde_json::from_str(FIXTURE).unwrap();
    assert_eq!(reference, frozen, "reference sampler drifted from the frozen fixture");
    let p = dirichlet_partition(&ds, 4, 0.1, 50, 7).unwrap();
    assert_eq!(p.devices, frozen);
}

#[test]
fn full_scale_shape_partition_and_public_set() {
    let ds = cycling(50_000, 10);
    let mut p = dirichlet_partition(&ds, 300, 0.1, 100, 1).unwrap();
    assert_eq!(p.devices.len(), 300);
    assert!(p.devices.iter().all(|s| s.len() == 100));
    let used = p.device_ids();
    assert_eq!(used.len(), 300 * 100);
    p.public = sample_public(&ds, &used, 100, 2).unwrap();
    assert_eq!(p.public.len(), 100);
    assert!(p.public.iter().all(|id| !used.contains(id)));
    p.validate(&ds, Some(100)).unwrap();

    // Non-IID sanity over all 300 shards.
    let mut entropies: Vec<f64> = p.devices.iter().map(|s| label_entropy_bits(&ds, s).unwrap()).collect();
    entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = entropies[entropies.len() / 2];
    assert!(median < 10f64.log2() - 1.0, "median entropy {median}");
}

#[test]
fn huge_concentration_gives_near_uniform_shards() {
    let ds = cycling(1000, 10);
    let p = dirichlet_partition(&ds, 2, 1e6, 100, 3).unwrap();
    for s in &p.devices {
        let mut hist = [0usize; 10];
        for &id in s {
            hist[ds.labels()[ds.index_of(id).unwrap()]] += 1;
        }
        assert!(hist.iter().all(|&c| c <= 20), "{hist:?}");
    }
}

#[test]
fn partition_errors() {
    let ds = cycling(100, 10);
    assert!(matches!(dirichlet_partition(&ds, 3, 0.1, 40, 0), Err(Error::Capacity { requested: 120, available: 100 })));
    assert!(matches!(dirichlet_partition(&ds, 2, 0.0, 10, 0), Err(Error::Domain(_))));
    assert!(matches!(dirichlet_partition(&ds, 2, -1.0, 10, 0), Err(Error::Domain(_))));
    let all: HashSet<u64> = ds.ids().iter().copied().collect();
    assert!(matches!(sample_public(&ds, &all, 1, 0), Err(Error::Capacity { .. })));
    assert_eq!(sample_public(&ds, &all, 0, 0).unwrap(), Vec::<u64>::new());
}

#[test]
fn group_partition_draws_only_from_assigned_group() {
    let groups = ["dark", "normal", "outdoor"];
    let n = 3 * 600;
    let ds = cycling(n, 5);
    let tags: Vec<String> = (0..n).map(|i| groups[i % 3].to_string()).collect();
    let assignment: Vec<String> = (0..30).map(|d| groups[d % 3].to_string()).collect();
    let p = group_partition(&ds, &tags, &assignment, 50, 4).unwrap();
    p.validate(&ds, Some(50)).unwrap();
    for (d, shard) in p.devices.iter().enumerate() {
        assert!(shard.iter().all(|&id| tags[ds.index_of(id).unwrap()] == assignment[d]));
    }
    assert_eq!(p, group_partition(&ds, &tags, &assignment, 50, 4).unwrap());

    let bad = vec!["indoor".to_string()];
    assert!(matches!(group_partition(&ds, &tags, &bad, 5, 0), Err(Error::Domain(_))));

    // One group, one device: a plain subsample.
    let one: Vec<String> = vec!["g".into(); n];
    let p = group_partition(&ds, &one, &["g".into()], 10, 0).unwrap();
    assert_eq!(p.devices[0].len(), 10);
}

#[test]
fn partition_json_is_byte_identical_across_invocations() {
    let ds = cycling(500, 10);
    let make = || {
        let mut p = dirichlet_partition(&ds, 4, 0.1, 50, 9).unwrap();
        p.public = sample_public(&ds, &p.device_ids(), 20, 10).unwrap();
        p.to_json().unwrap()
    };
    let text = make();
    assert_eq!(text, make());
    let back = Partition::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["alpha", "devices", "public", "seed"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn dataset_directory_round_trip() {
    let ds = synthetic::prototypes(3, 4, [1, 2, 2], 0.1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, "proto", dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.features(), ds.features());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_are_exact_disjoint_and_deterministic(
        devices in 1usize..8,
        per in 1usize..40,
        alpha in prop::sample::select(vec![0.05, 0.1, 0.5, 1.0, 10.0]),
        classes in 2usize..12,
        seed in any::<u64>(),
        public in 0usize..30,
    ) {
        let n = devices * per + public + 7;
        let ds = cycling(n, classes);
        let mut p = dirichlet_partition(&ds, devices, alpha, per, seed).unwrap();
        p.public = sample_public(&ds, &p.device_ids(), public, seed ^ 1).unwrap();
        prop_assert!(p.validate(&ds, Some(per)).is_ok());
        let used = p.device_ids();
        prop_assert_eq!(used.len(), devices * per);
        prop_assert!(p.public.iter().all(|id| !used.contains(id)));
        let again = dirichlet_partition(&ds, devices, alpha, per, seed).unwrap();
        prop_assert_eq!(&again.devices, &p.devices);
    }
}
