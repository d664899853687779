//! Pre-aggregation and fidelity-weighted merging against recomputation
//! oracles, plus their algebraic properties.

use std::sync::Arc;

use hetfl::fidelity::{aggregate, fidelity, fidelity_weights, logit_fidelity};
use hetfl::model::{ArchitectureSpec, DeviceModel, LayerKind, LayerSpec};
use hetfl::prom::pre_aggregate;
use hetfl::data::synthetic;
use hetfl::Tensor;
use proptest::prelude::*;

/// A 4 -> `width` -> 2 perceptron; `width = 16` gives 114 parameters.
fn mlp(width: usize) -> Arc<ArchitectureSpec> {
    Arc::new(ArchitectureSpec {
        name: format!("mlp{width}"),
        input_shape: [4, 1, 1],
        num_classes: 2,
        layers: vec![
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Linear { in_features: 4, out_features: width }),
            LayerSpec::new("fc_relu", LayerKind::Relu),
            LayerSpec::new("head", LayerKind::Linear { in_features: width, out_features: 2 }),
        ],
        feature_taps: vec!["fc_relu".into()],
    })
}

/// Models with every weight (biases included) drawn at random.
fn models(arch: &Arc<ArchitectureSpec>, seeds: &[u64]) -> Vec<DeviceModel<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let mut m = DeviceModel::<f64>::instantiate(arch.clone(), s).unwrap();
            for (k, p) in m.params_mut().iter_mut().enumerate() {
                for (i, v) in p.data.iter_mut().enumerate() {
                    if p.shape.len() == 1 {
                        *v = ((s as f64 + 1.0) * (k + i + 1) as f64).sin();
                    }
                }
            }
            m
        })
        .collect()
}

fn oracle_mean(models: &[DeviceModel<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let flats: Vec<Vec<f64>> = models.iter().map(DeviceModel::flat).collect();
    (0..flats[0].len())
        .map(|i| flats.iter().zip(weights).map(|(f, w)| f[i] * w).sum::<f64>() / total)
        .collect()
}

#[test]
fn pre_aggregate_matches_direct_weighted_mean() {
    let arch = mlp(14);
    let ms = models(&arch, &[1, 2, 3, 4, 5]);
    assert!((90..=110).contains(&ms[0].param_count()));
    let refs: Vec<&DeviceModel<f64>> = ms.iter().collect();
    let out = pre_aggregate(&refs, &[1, 2, 3, 4, 5]).unwrap().flat();
    let want = oracle_mean(&ms, &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let diff = out.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max abs diff {diff}");
}

#[test]
fn pre_aggregate_trivial_cases() {
    let arch = mlp(4);
    let m = models(&arch, &[9]).remove(0);
    let same = pre_aggregate(&[&m, &m, &m], &[3, 1, 7]).unwrap().flat();
    for (a, b) in same.iter().zip(m.flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut zero = m.clone();
    let mut two = m.clone();
    for p in zero.params_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    for p in two.params_mut() {
        p.data.iter_mut().for_each(|v| *v = 2.0);
    }
    assert!(pre_aggregate(&[&zero, &two], &[1, 1]).unwrap().flat().iter().all(|&v| v == 1.0));
}

#[test]
fn aggregate_matches_recomputation_and_degenerate_weights() {
    let arch = mlp(8); // 58 parameters
    let ms = models(&arch, &[11, 12, 13]);
    let refs: Vec<&DeviceModel<f64>> = ms.iter().collect();
    let (out, w) = aggregate(&refs, &[0.2, 0.3, 0.5], 1.0, false).unwrap();
    let want = oracle_mean(&ms, &[0.2, 0.3, 0.5]);
    let diff = out.flat().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let (one, _) = aggregate(&refs[..2], &[1.0, 0.0], 1.0, false).unwrap();
    assert_eq!(one.flat(), ms[0].flat());
    let (eq, _) = aggregate(&refs, &[0.4, 0.4, 0.4], 1.0, false).unwrap();
    let (uniform, w) = aggregate(&refs, &[0.9, 0.1, 0.0], 1.0, true).unwrap();
    assert_eq!(w, vec![1.0 / 3.0; 3]);
    for (a, b) in eq.flat().iter().zip(uniform.flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (fallback, _) = aggregate(&refs, &[0.0, 0.0, 0.0], 1.0, false).unwrap();
    assert_eq!(fallback.flat(), uniform.flat());
}

#[test]
fn model_fidelity_end_to_end() {
    let arch = mlp(6);
    let data = synthetic::prototypes(5, 2, [4, 1, 1], 0.5, 3).unwrap();
    let m = models(&arch, &[1]).remove(0);
    assert!((fidelity(0, &m, &m, &data.view()).unwrap().value - 1.0).abs() < 1e-12);
    // Negating the head negates every logit.
    let mut neg = m.clone();
    let n = neg.params().len();
    for p in &mut neg.params_mut()[n - 2..] {
        p.data.iter_mut().for_each(|v| *v = -*v);
    }
    assert!(fidelity(0, &m, &neg, &data.view()).unwrap().value.abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pre_aggregate_is_convex_and_permutation_invariant(
        seeds in prop::collection::vec(0u64..1000, 2..6),
        counts in prop::collection::vec(1usize..50, 6),
        rotate in 0usize..6,
    ) {
        let arch = mlp(3);
        let ms = models(&arch, &seeds);
        let counts = &counts[..ms.len()];
        let refs: Vec<&DeviceModel<f64>> = ms.iter().collect();
        let out = pre_aggregate(&refs, counts).unwrap().flat();
        let flats: Vec<Vec<f64>> = ms.iter().map(DeviceModel::flat).collect();
        for (i, v) in out.iter().enumerate() {
            let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let k = rotate % ms.len();
        let mut r_refs = refs.clone();
        let mut r_counts = counts.to_vec();
        r_refs.rotate_left(k);
        r_counts.rotate_left(k);
        let rotated = pre_aggregate(&r_refs, &r_counts).unwrap().flat();
        for (a, b) in out.iter().zip(&rotated) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // Equal counts reduce to the unweighted mean.
        let eq = pre_aggregate(&refs, &vec![7; ms.len()]).unwrap().flat();
        let mean = oracle_mean(&ms, &vec![1.0; ms.len()]);
        for (a, b) in eq.iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_is_bounded_and_scale_invariant(
        a in prop::collection::vec(-50.0f64..50.0, 12),
        b in prop::collection::vec(-50.0f64..50.0, 12),
        scale in 1e-3f64..1e3,
    ) {
        let ta = Tensor::from_vec([4, 3, 1, 1], a).unwrap();
        let tb = Tensor::from_vec([4, 3, 1, 1], b.clone()).unwrap();
        let (f, _) = logit_fidelity(&ta, &tb).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let scaled = Tensor::from_vec([4, 3, 1, 1], b.iter().map(|v| v * scale).collect()).unwrap();
        let (g, _) = logit_fidelity(&ta, &scaled).unwrap();
        prop_assert!((f - g).abs() < 1e-12);
    }

    #[test]
    fn fidelity_weights_sum_to_one_and_merge_is_convex(
        fids in prop::collection::vec(0.0f64..=1.0, 3),
        exponent in 0.25f64..4.0,
    ) {
        let (w, _) = fidelity_weights(&fids, exponent).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let arch = mlp(3);
        let ms = models(&arch, &[1, 2, 3]);
        let refs: Vec<&DeviceModel<f64>> = ms.iter().collect();
        let (out, _) = aggregate(&refs, &fids, exponent, false).unwrap();
        let flats: Vec<Vec<f64>> = ms.iter().map(DeviceModel::flat).collect();
        for (i, v) in out.flat().iter().enumerate() {
            let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
