//! Fidelity-weighted merging of the per-type proxies.
//!
//! A proxy's fidelity is how well it reproduces the logits of the
//! pre-aggregated model it was distilled from: the per-sample cosine of the two
//! logit vectors on the public set, averaged, then mapped from `[-1, 1]` to
//! `[0, 1]`. A sample where either vector has zero norm counts as cosine 0 and
//! is tallied in [`FidelityScore::zero_norm_samples`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::model::{predict, DeviceModel};
use crate::prom::weighted_average;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    pub type_index: usize,
    /// In `[0, 1]`.
    pub value: f64,
    pub zero_norm_samples: usize,
}

/// Mean per-sample cosine of two `[N, K]` logit tensors, mapped to `[0, 1]`.
/// Returns the score and the number of zero-norm samples.
pub fn logit_fidelity<T: Scalar>(reference: &Tensor<T>, candidate: &Tensor<T>) -> Result<(f64, usize)> {
    if reference.shape() != candidate.shape() {
        return Err(Error::ShapeMismatch {
            context: "logits compared for fidelity".into(),
            expected: reference.shape().to_vec(),
            actual: candidate.shape().to_vec(),
        });
    }
    let n = reference.batch();
    if n == 0 {
        return Err(Error::domain("fidelity on an empty public set"));
    }
    let mut total = 0.0;
    let mut zero_norm = 0;
    for b in 0..n {
        let (x, y) = (reference.sample(b), candidate.sample(b));
        let dot: f64 = x.iter().zip(y).map(|(a, c)| a.as_f64() * c.as_f64()).sum();
        let nx = x.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            zero_norm += 1;
            continue;
        }
        total += (dot / (nx * ny)).clamp(-1.0, 1.0);
    }
    Ok(((total / n as f64 + 1.0) / 2.0, zero_norm))
}

/// Fidelity of `proxy` to the pre-aggregated model `reference` on `public`.
pub fn fidelity<T: Scalar>(
    type_index: usize,
    reference: &DeviceModel<T>,
    proxy: &DeviceModel<T>,
    public: &DatasetView<'_>,
) -> Result<FidelityScore> {
    if reference.arch().num_classes != proxy.arch().num_classes {
        return Err(Error::ShapeMismatch {
            context: "output width for fidelity".into(),
            expected: vec![reference.arch().num_classes],
            actual: vec![proxy.arch().num_classes],
        });
    }
    if public.is_empty() {
        return Err(Error::domain("fidelity on an empty public set"));
    }
    let (value, zero_norm_samples) = logit_fidelity(&predict(reference, public)?, &predict(proxy, public)?)?;
    Ok(FidelityScore {
        type_index,
        value,
        zero_norm_samples,
    })
}

/// Normalized aggregation weights `fid_i^exponent / sum`. Falls back to
/// uniform weights (with a warning) when every powered fidelity is zero.
/// Returns the weights and whether the fallback fired.
pub fn fidelity_weights(fids: &[f64], exponent: f64) -> Result<(Vec<f64>, bool)> {
    if fids.is_empty() {
        return Err(Error::domain("no fidelity scores"));
    }
    if let Some(f) = fids.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::domain(format!("fidelity {f} outside [0, 1]")));
    }
    if !(exponent.is_finite() && exponent > 0.0) {
        return Err(Error::domain(format!("fidelity exponent must be positive, got {exponent}")));
    }
    let powered: Vec<f64> = fids.iter().map(|f| f.powf(exponent)).collect();
    let sum: f64 = powered.iter().sum();
    if sum > 0.0 {
        Ok((powered.iter().map(|p| p / sum).collect(), false))
    } else {
        warn!("all fidelities are zero; merging proxies with uniform weights");
        Ok((vec![1.0 / fids.len() as f64; fids.len()], true))
    }
}

/// Global proxy `sum_i w_i * proxy_i` with fidelity weights (or uniform
/// weights when `uniform` is set). Returns the model and the weights used.
pub fn aggregate<T: Scalar>(
    proxies: &[&DeviceModel<T>],
    fids: &[f64],
    exponent: f64,
    uniform: bool,
) -> Result<(DeviceModel<T>, Vec<f64>)> {
    if proxies.len() != fids.len() {
        return Err(Error::domain(format!(
            "{} proxies but {} fidelity scores",
            proxies.len(),
            fids.len()
        )));
    }
    let weights = if uniform {
        vec![1.0 / fids.len().max(1) as f64; fids.len()]
    } else {
        fidelity_weights(fids, exponent)?.0
    };
    Ok((weighted_average(proxies, &weights)?, weights))
}
