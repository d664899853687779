//! Transfer signals, the per-pair and combined losses, and their gradients.

use serde::{Deserialize, Serialize};

use super::meta::{MetaNetworkPair, DEG_B, DEG_W, LOC_B, LOC_W, PROJ};
use crate::error::{Error, Result};
use crate::model::train::cross_entropy;
use crate::model::{DeviceModel, Grads};
use crate::scalar::Scalar;
use crate::tensor::{gemm, softmax_into, Tensor};

/// Which terms drive the transfer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Cross-entropy plus location-weighted degree losses.
    #[default]
    Full,
    /// Cross-entropy on the public labels only.
    CeOnly,
    /// Location-weighted degree losses only.
    LocationOnly,
    /// Cross-entropy plus plain feature MSE: uniform location, unit degree.
    CeMse,
}

impl LossVariant {
    pub fn uses_features(self) -> bool {
        self != LossVariant::CeOnly
    }

    pub fn uses_labels(self) -> bool {
        self != LossVariant::LocationOnly
    }

    fn learned_signals(self) -> bool {
        matches!(self, LossVariant::Full | LossVariant::LocationOnly)
    }
}

/// Batch-averaged location and degree signals, indexed `[m][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSignals<T> {
    /// Each row sums to one over the target taps.
    pub loc: Vec<Vec<T>>,
    /// Per source channel, in `[0, C_src]`, mean one.
    pub deg: Vec<Vec<Vec<T>>>,
}

/// Loss terms of one batch. Inactive terms are zero, so
/// `l_final == l_ce + l_location` holds for every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerms<T> {
    /// Source-major, one per pair.
    pub l_degree: Vec<T>,
    pub l_location: T,
    pub l_ce: T,
    pub l_final: T,
}

/// Gradients of `l_final`: target model, then per pair unit per slot.
#[derive(Clone, Debug)]
pub struct WireGrads<T> {
    pub target: Grads<T>,
    pub meta: Vec<Vec<Vec<T>>>,
}

/// Spatial mean of every channel: `[B, C, H, W]` to row-major `[B, C]`.
fn pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let hw = x.spatial();
    let inv = T::one() / T::of_usize(hw);
    x.data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect()
}

/// `out[b] = w * v[b] + bias`, with `w` `[rows, cols]` and `v` `[B, cols]`.
fn affine<T: Scalar>(v: &[T], batch: usize, w: &[T], bias: &[T], rows: usize) -> Vec<T> {
    let cols = v.len() / batch;
    let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    gemm(batch, cols, rows, T::one(), v, false, w, true, T::one(), &mut out);
    out
}

/// Per-sample location probabilities `[B, N]` for source tap `m`.
fn location_probs<T: Scalar>(meta: &MetaNetworkPair<T>, m: usize, pooled: &[T], batch: usize) -> Vec<T> {
    let n_targets = meta.num_target_taps();
    let cs = meta.source_shapes()[m][0];
    let mut logits = vec![T::zero(); batch * n_targets];
    for n in 0..n_targets {
        let u = &meta.unit(m, n).params;
        for b in 0..batch {
            let s = &pooled[b * cs..(b + 1) * cs];
            logits[b * n_targets + n] =
                u[LOC_B].data[0] + u[LOC_W].data.iter().zip(s).map(|(&w, &x)| w * x).sum::<T>();
        }
    }
    let mut probs = vec![T::zero(); logits.len()];
    for (l, p) in logits.chunks(n_targets).zip(probs.chunks_mut(n_targets)) {
        softmax_into(l, p);
    }
    probs
}

/// Per-sample degree softmax `[B, C_src]` for pair `(m, n)`, before scaling.
fn degree_probs<T: Scalar>(meta: &MetaNetworkPair<T>, m: usize, n: usize, pooled: &[T], batch: usize) -> Vec<T> {
    let cs = meta.source_shapes()[m][0];
    let u = &meta.unit(m, n).params;
    let logits = affine(pooled, batch, &u[DEG_W].data, &u[DEG_B].data, cs);
    let mut probs = vec![T::zero(); logits.len()];
    for (l, p) in logits.chunks(cs).zip(probs.chunks_mut(cs)) {
        softmax_into(l, p);
    }
    probs
}

fn batch_mean<T: Scalar>(rows: &[T], width: usize, scale: T) -> Vec<T> {
    let batch = rows.len() / width;
    let k = scale / T::of_usize(batch);
    let mut mean = vec![T::zero(); width];
    for r in rows.chunks(width) {
        for (a, &v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a *= k);
    mean
}

fn check_source_taps<T: Scalar>(meta: &MetaNetworkPair<T>, taps: &[Tensor<T>]) -> Result<usize> {
    if taps.len() != meta.num_source_taps() {
        return Err(Error::ShapeMismatch {
            context: "source feature taps".into(),
            expected: vec![meta.num_source_taps()],
            actual: vec![taps.len()],
        });
    }
    let batch = taps[0].batch();
    for (t, s) in taps.iter().zip(meta.source_shapes()) {
        let [b, c, h, w] = t.shape();
        if b != batch || [c, h, w] != *s {
            return Err(Error::ShapeMismatch {
                context: "source feature tap".into(),
                expected: vec![batch, s[0], s[1], s[2]],
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(batch)
}

/// Location of every pair: per source tap, the per-sample softmax over target
/// taps of the location unit applied to the pooled source feature, averaged
/// over the batch.
pub fn transfer_location<T: Scalar>(meta: &MetaNetworkPair<T>, source_taps: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
    let batch = check_source_taps(meta, source_taps)?;
    Ok(source_taps
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let p = location_probs(meta, m, &pool(s), batch);
            batch_mean(&p, meta.num_target_taps(), T::one())
        })
        .collect())
}

/// Per-channel degree of every pair: softmax of the degree unit over source
/// channels, scaled by the channel count (so the uniform case is all ones),
/// averaged over the batch.
pub fn transfer_degree<T: Scalar>(meta: &MetaNetworkPair<T>, source_taps: &[Tensor<T>]) -> Result<Vec<Vec<Vec<T>>>> {
    let batch = check_source_taps(meta, source_taps)?;
    Ok(source_taps
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let pooled = pool(s);
            let cs = meta.source_shapes()[m][0];
            (0..meta.num_target_taps())
                .map(|n| {
                    let q = degree_probs(meta, m, n, &pooled, batch);
                    batch_mean(&q, cs, T::of_usize(cs))
                        .into_iter()
                        .map(|d| d.max(T::zero()).min(T::of_usize(cs)))
                        .collect()
                })
                .collect()
        })
        .collect())
}

pub fn transfer_signals<T: Scalar>(meta: &MetaNetworkPair<T>, source_taps: &[Tensor<T>]) -> Result<TransferSignals<T>> {
    Ok(TransferSignals {
        loc: transfer_location(meta, source_taps)?,
        deg: transfer_degree(meta, source_taps)?,
    })
}

/// Adapter output for target feature `n` in the shape of source feature `m`:
/// the 1x1 projection applied after bilinear resampling. Also returns the
/// resampled target (`[B, C_tgt, H_src * W_src]`) for the backward pass.
pub fn adapt<T: Scalar>(meta: &MetaNetworkPair<T>, m: usize, n: usize, target_feature: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let s = meta.source_shapes()[m];
    let t = meta.target_shapes()[n];
    let [b, c, h, w] = target_feature.shape();
    if [c, h, w] != t {
        return Err(Error::ShapeMismatch {
            context: format!("target feature {n}"),
            expected: t.to_vec(),
            actual: vec![c, h, w],
        });
    }
    let unit = meta.unit(m, n);
    let (hw_s, hw_t) = (s[1] * s[2], t[1] * t[2]);
    let resampled = match &unit.resample {
        Some(r) => {
            let mut g = vec![T::zero(); b * t[0] * hw_s];
            gemm(b * t[0], hw_t, hw_s, T::one(), target_feature.data(), false, r, true, T::zero(), &mut g);
            g
        }
        None => target_feature.data().to_vec(),
    };
    let mut out = Tensor::zeros([b, s[0], s[1], s[2]]);
    let p = &unit.params[PROJ].data;
    for (g, a) in resampled.chunks(t[0] * hw_s).zip(out.data_mut().chunks_mut(s[0] * hw_s)) {
        gemm(s[0], t[0], hw_s, T::one(), p, false, g, false, T::zero(), a);
    }
    Ok((out, resampled))
}

/// Channel-weighted mean squared error between an adapted target feature and
/// the source feature: `sum(deg_c * (a - s)^2) / (B * C * H * W)`.
pub fn degree_loss<T: Scalar>(adapted: &Tensor<T>, source: &Tensor<T>, deg: &[T]) -> Result<T> {
    if adapted.shape() != source.shape() || deg.len() != source.channels() {
        return Err(Error::ShapeMismatch {
            context: "adapted feature vs source feature".into(),
            expected: source.shape().to_vec(),
            actual: adapted.shape().to_vec(),
        });
    }
    let hw = source.spatial();
    let c = source.channels();
    let mut total = T::zero();
    for (k, (a, s)) in adapted.data().chunks(hw).zip(source.data().chunks(hw)).enumerate() {
        let sq: T = a.iter().zip(s).map(|(&x, &y)| (x - y) * (x - y)).sum();
        total += deg[k % c] * sq;
    }
    Ok(total / T::of_usize(source.data().len().max(1)))
}

/// `sum over pairs of loc(m, n) * l_degree(m, n)`; inputs indexed `[m][n]`.
pub fn location_loss<T: Scalar>(loc: &[Vec<T>], l_degree: &[Vec<T>]) -> T {
    loc.iter()
        .zip(l_degree)
        .flat_map(|(l, d)| l.iter().zip(d).map(|(&a, &b)| a * b))
        .sum()
}

/// Loss terms and gradients for one batch.
///
/// `source_taps` are the frozen source features of `x` (ignored, and may be
/// empty, for [`LossVariant::CeOnly`]). No gradient reaches the source.
pub fn wire_objective<T: Scalar>(
    source_taps: &[Tensor<T>],
    target: &DeviceModel<T>,
    meta: &MetaNetworkPair<T>,
    x: &Tensor<T>,
    labels: &[usize],
    variant: LossVariant,
) -> Result<(ObjectiveTerms<T>, WireGrads<T>)> {
    let trace = target.forward_trace(x)?;
    let feats = target.features_of(&trace);
    let n_targets = meta.num_target_taps();
    let n_pairs = meta.num_source_taps() * n_targets;
    let (ce, mut d_logits) = cross_entropy(trace.logits(), labels);
    let l_ce = if variant.uses_labels() {
        ce
    } else {
        d_logits.data_mut().iter_mut().for_each(|v| *v = T::zero());
        T::zero()
    };
    let mut tap_grads: Vec<Option<Tensor<T>>> = vec![None; n_targets];
    let mut meta_grads = meta.zero_grads();
    let mut l_degree = vec![T::zero(); n_pairs];
    let mut l_location = T::zero();

    if variant.uses_features() {
        let batch = check_source_taps(meta, source_taps)?;
        let learned = variant.learned_signals();
        for (m, src) in source_taps.iter().enumerate() {
            let [_, cs, hs, ws] = src.shape();
            let hw_s = hs * ws;
            let pooled = pool(src);
            let loc_probs = learned.then(|| location_probs(meta, m, &pooled, batch));
            let loc: Vec<T> = match &loc_probs {
                Some(p) => batch_mean(p, n_targets, T::one()),
                None => vec![T::one() / T::of_usize(n_targets); n_targets],
            };
            let norm = T::one() / T::of_usize(batch * cs * hw_s);
            for n in 0..n_targets {
                let k = m * n_targets + n;
                let deg_probs = learned.then(|| degree_probs(meta, m, n, &pooled, batch));
                let deg: Vec<T> = match &deg_probs {
                    Some(q) => batch_mean(q, cs, T::of_usize(cs)),
                    None => vec![T::one(); cs],
                };
                let (adapted, resampled) = adapt(meta, m, n, &feats.taps[n])?;
                // Per-channel mean squared residual, and the residual itself.
                let mut err = vec![T::zero(); cs];
                let mut resid = adapted;
                for (i, (r, &s)) in resid.data_mut().iter_mut().zip(src.data()).enumerate() {
                    *r -= s;
                    err[(i / hw_s) % cs] += *r * *r * norm;
                }
                let ld: T = deg.iter().zip(&err).map(|(&d, &e)| d * e).sum();
                l_degree[k] = ld;
                l_location += loc[n] * ld;

                // d l_location / d adapted = loc * 2 * norm * deg_c * resid.
                let two = T::of(2.0) * norm * loc[n];
                for (i, r) in resid.data_mut().iter_mut().enumerate() {
                    *r *= two * deg[(i / hw_s) % cs];
                }
                let d_adapted = resid;
                let unit = meta.unit(m, n);
                let ct = meta.target_shapes()[n][0];
                let hw_t = meta.target_shapes()[n][1] * meta.target_shapes()[n][2];
                let proj = &unit.params[PROJ].data;
                let mut d_resampled = vec![T::zero(); batch * ct * hw_s];
                for b in 0..batch {
                    let da = d_adapted.sample(b);
                    let g = &resampled[b * ct * hw_s..(b + 1) * ct * hw_s];
                    gemm(cs, hw_s, ct, T::one(), da, false, g, true, T::one(), &mut meta_grads[k][PROJ]);
                    gemm(ct, cs, hw_s, T::one(), proj, true, da, false, T::zero(), &mut d_resampled[b * ct * hw_s..(b + 1) * ct * hw_s]);
                }
                let d_feature = match &unit.resample {
                    Some(r) => {
                        let mut df = vec![T::zero(); batch * ct * hw_t];
                        gemm(batch * ct, hw_s, hw_t, T::one(), &d_resampled, false, r, false, T::zero(), &mut df);
                        df
                    }
                    None => d_resampled,
                };
                let d_feature = Tensor::from_vec(feats.taps[n].shape(), d_feature)?;
                match &mut tap_grads[n] {
                    Some(g) => g.add_assign(&d_feature),
                    slot => *slot = Some(d_feature),
                }

                // Degree unit: deg_c = (C / B) sum_b q_bc.
                if let Some(q) = &deg_probs {
                    let scale = T::of_usize(cs) / T::of_usize(batch);
                    let dq: Vec<T> = err.iter().map(|&e| loc[n] * e * scale).collect();
                    let mut du = vec![T::zero(); batch * cs];
                    for (qb, dub) in q.chunks(cs).zip(du.chunks_mut(cs)) {
                        let dot: T = qb.iter().zip(&dq).map(|(&a, &b)| a * b).sum();
                        for ((d, &qi), &g) in dub.iter_mut().zip(qb).zip(&dq) {
                            *d = qi * (g - dot);
                        }
                    }
                    let grads = &mut meta_grads[k];
                    gemm(cs, batch, cs, T::one(), &du, true, &pooled, false, T::one(), &mut grads[DEG_W]);
                    for dub in du.chunks(cs) {
                        for (a, &d) in grads[DEG_B].iter_mut().zip(dub) {
                            *a += d;
                        }
                    }
                }
            }
            // Location units: loc_n = (1 / B) sum_b p_bn, d l / d loc_n = l_degree.
            if let Some(p) = &loc_probs {
                let inv_b = T::one() / T::of_usize(batch);
                let dp: Vec<T> = (0..n_targets).map(|n| l_degree[m * n_targets + n] * inv_b).collect();
                for (b, pb) in p.chunks(n_targets).enumerate() {
                    let dot: T = pb.iter().zip(&dp).map(|(&a, &g)| a * g).sum();
                    let s = &pooled[b * cs..(b + 1) * cs];
                    for n in 0..n_targets {
                        let dz = pb[n] * (dp[n] - dot);
                        let g = &mut meta_grads[m * n_targets + n];
                        for (w, &x) in g[LOC_W].iter_mut().zip(s) {
                            *w += dz * x;
                        }
                        g[LOC_B][0] += dz;
                    }
                }
            }
        }
    }

    let target_grads = target.backward(&trace, &d_logits, &tap_grads);
    Ok((
        ObjectiveTerms {
            l_degree,
            l_location,
            l_ce,
            l_final: l_ce + l_location,
        },
        WireGrads {
            target: target_grads,
            meta: meta_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, LayerKind, LayerSpec};

    fn fc_arch(name: &str, taps: &[(&str, usize)]) -> ArchitectureSpec {
        let mut layers = vec![LayerSpec::new("flatten", LayerKind::Flatten)];
        let mut width = 2;
        for (id, w) in taps {
            layers.push(LayerSpec::new(*id, LayerKind::Linear { in_features: width, out_features: *w }));
            width = *w;
        }
        layers.push(LayerSpec::new("head", LayerKind::Linear { in_features: width, out_features: 2 }));
        ArchitectureSpec {
            name: name.into(),
            input_shape: [2, 1, 1],
            num_classes: 2,
            layers,
            feature_taps: taps.iter().map(|(id, _)| id.to_string()).collect(),
        }
    }

    #[test]
    fn zero_meta_weights_give_uniform_signals() {
        let s = fc_arch("s", &[("a", 3), ("b", 4)]);
        let t = fc_arch("t", &[("x", 3), ("y", 5)]);
        let mut meta = MetaNetworkPair::<f64>::new(&s, &t, 0).unwrap();
        for u in meta.units_mut() {
            for slot in [LOC_W, DEG_W] {
                u.params[slot].data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let taps = vec![
            Tensor::from_vec([2, 3, 1, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            Tensor::from_vec([2, 4, 1, 1], vec![1.; 8]).unwrap(),
        ];
        let sig = transfer_signals(&meta, &taps).unwrap();
        for row in &sig.loc {
            assert!(row.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
        for d in sig.deg.iter().flatten().flatten() {
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_location_logits() {
        let s = fc_arch("s", &[("a", 1)]);
        let t = fc_arch("t", &[("x", 3), ("y", 3)]);
        let mut meta = MetaNetworkPair::<f64>::new(&s, &t, 0).unwrap();
        // Pooled source feature is 1.0; logits become (1.0, 0.0).
        meta.unit_mut(0, 0).params[LOC_W].data = vec![1.0];
        meta.unit_mut(0, 1).params[LOC_W].data = vec![0.0];
        let taps = vec![Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap()];
        let loc = transfer_location(&meta, &taps).unwrap();
        let e = std::f64::consts::E;
        assert!((loc[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((loc[0][1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn hand_set_degree_logits() {
        let s = fc_arch("s", &[("a", 3)]);
        let t = fc_arch("t", &[("x", 2)]);
        let mut meta = MetaNetworkPair::<f64>::new(&s, &t, 0).unwrap();
        let u = meta.unit_mut(0, 0);
        u.params[DEG_W].data = vec![0.0; 9];
        u.params[DEG_B].data = vec![0.0, 2f64.ln(), 4f64.ln()];
        let taps = vec![Tensor::from_vec([1, 3, 1, 1], vec![0.3, -1.0, 2.0]).unwrap()];
        let deg = transfer_degree(&meta, &taps).unwrap();
        for (d, want) in deg[0][0].iter().zip([1.0, 2.0, 4.0]) {
            assert!((d - 3.0 * want / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_loss_fixtures() {
        let src = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let a = Tensor::from_vec([1, 2, 1, 1], vec![1.0, -2.0]).unwrap();
        assert!((degree_loss(&a, &src, &[1.0, 1.0]).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(degree_loss(&a, &src, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(degree_loss(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);
        let wrong = Tensor::<f64>::zeros([1, 3, 1, 1]);
        assert!(degree_loss(&wrong, &src, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn location_loss_fixtures() {
        // Uniform over two targets, degree losses (2, 4): 3 per source tap.
        let loc: Vec<Vec<f64>> = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let ld = vec![vec![2.0, 4.0], vec![2.0, 4.0]];
        assert!((location_loss(&loc, &ld) - 6.0).abs() < 1e-12);
        assert_eq!(location_loss(&loc, &[vec![0.0, 0.0], vec![0.0, 0.0]]), 0.0);
        assert_eq!(location_loss(&[vec![1.0, 0.0]], &[vec![0.0, 7.0]]), 0.0);
    }
}
