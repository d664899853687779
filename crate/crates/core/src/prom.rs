//! Proxy models and per-architecture pre-aggregation.
//!
//! All device architectures are bridged through proxies of one shared
//! architecture, the largest tier. Same-architecture uploads are first merged
//! by sample-count weighted averaging.

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, DeviceModel, Owner};
use crate::scalar::Scalar;

/// Which aggregate a proxy stands in for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxyRole {
    Type(usize),
    Global,
}

/// A model with the proxy architecture, tagged with its role.
#[derive(Clone, Debug)]
pub struct ProxyModel<T> {
    pub model: DeviceModel<T>,
    pub role: ProxyRole,
}

impl<T: Scalar> ProxyModel<T> {
    pub fn new(model: DeviceModel<T>, role: ProxyRole) -> Self {
        let owner = match role {
            ProxyRole::Type(type_index) => Owner::Proxy { type_index },
            ProxyRole::Global => Owner::GlobalProxy,
        };
        ProxyModel {
            model: model.with_owner(owner),
            role,
        }
    }
}

/// The spec with the most parameters; ties go to the lexicographically
/// smallest name. Returns `None` for an empty list.
pub fn choose_proxy_architecture(specs: &[ArchitectureSpec]) -> Option<&ArchitectureSpec> {
    specs.iter().reduce(|best, s| {
        let (pb, ps) = (best.param_count(), s.param_count());
        if ps > pb || (ps == pb && s.name < best.name) {
            s
        } else {
            best
        }
    })
}

/// `sum_k weights[k] * models[k]`, element-wise. Models must share one
/// architecture; the weights are used as given.
pub fn weighted_average<T: Scalar>(models: &[&DeviceModel<T>], weights: &[f64]) -> Result<DeviceModel<T>> {
    let first = *models
        .first()
        .ok_or_else(|| Error::domain("average of zero models"))?;
    if models.len() != weights.len() {
        return Err(Error::domain(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(m) = models.iter().find(|m| m.arch() != first.arch()) {
        return Err(Error::ArchMismatch {
            expected: first.arch().name.clone(),
            actual: m.arch().name.clone(),
        });
    }
    let weights: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
    let mut out = first.clone();
    for (t, p) in out.params_mut().iter_mut().enumerate() {
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = models
                .iter()
                .zip(&weights)
                .map(|(m, &w)| w * m.params()[t].data[i])
                .sum();
        }
    }
    Ok(out)
}

/// Element-wise mean of same-architecture models, weighted by `sample_counts`.
pub fn pre_aggregate<T: Scalar>(
    models: &[&DeviceModel<T>],
    sample_counts: &[usize],
) -> Result<DeviceModel<T>> {
    let first = *models
        .first()
        .ok_or_else(|| Error::domain("pre-aggregation of zero models"))?;
    if models.len() != sample_counts.len() {
        return Err(Error::domain(format!(
            "{} models but {} sample counts",
            models.len(),
            sample_counts.len()
        )));
    }
    if sample_counts.contains(&0) {
        return Err(Error::domain("sample counts must be positive"));
    }
    let total: usize = sample_counts.iter().sum();
    let weights: Vec<f64> = sample_counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut out = weighted_average(models, &weights)?;
    out.owner = match first.owner {
        Owner::Device { type_index, .. } => Owner::PreAggregate { type_index },
        other => other,
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{arch, LayerKind, LayerSpec};

    fn named(name: &str, width: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            name: name.into(),
            input_shape: [1, 1, 4],
            num_classes: 2,
            layers: vec![
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::Linear { in_features: 4, out_features: width }),
                LayerSpec::new("head", LayerKind::Linear { in_features: width, out_features: 2 }),
            ],
            feature_taps: vec!["fc".into()],
        }
    }

    #[test]
    fn largest_tier_becomes_the_proxy() {
        let specs = vec![
            arch::medium([1, 8, 8], 10),
            arch::large([1, 8, 8], 10),
            arch::small([1, 8, 8], 10),
        ];
        assert_eq!(choose_proxy_architecture(&specs).unwrap().name, "large");
        assert_eq!(choose_proxy_architecture(&specs[2..]).unwrap().name, "small");
        assert!(choose_proxy_architecture(&[]).is_none());
    }

    #[test]
    fn equal_sizes_break_ties_by_name() {
        let specs = vec![named("b", 3), named("a", 3)];
        assert_eq!(choose_proxy_architecture(&specs).unwrap().name, "a");
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        let a = DeviceModel::<f64>::instantiate(Arc::new(named("a", 3)), 0).unwrap();
        let b = DeviceModel::<f64>::instantiate(Arc::new(named("b", 3)), 0).unwrap();
        assert!(matches!(pre_aggregate(&[&a, &b], &[1, 1]), Err(Error::ArchMismatch { .. })));
        assert!(pre_aggregate(&[&a], &[0]).is_err());
        assert!(pre_aggregate::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn owner_becomes_pre_aggregate_of_the_type() {
        let a = DeviceModel::<f32>::instantiate(Arc::new(named("a", 3)), 0)
            .unwrap()
            .with_owner(Owner::Device { type_index: 2, device_index: 0 });
        let out = pre_aggregate(&[&a, &a], &[1, 1]).unwrap();
        assert_eq!(out.owner, Owner::PreAggregate { type_index: 2 });
    }
}
