use rand::Rng;

use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Checkpoint, CheckpointManifest};
use crate::model::{ArchitectureSpec, Param};
use crate::scalar::Scalar;
use crate::seed;

/// Parameter slots of one pair unit, in storage order.
pub(crate) const LOC_W: usize = 0;
pub(crate) const LOC_B: usize = 1;
pub(crate) const DEG_W: usize = 2;
pub(crate) const DEG_B: usize = 3;
pub(crate) const PROJ: usize = 4;
const SLOT_NAMES: [&str; 5] = [
    "location.weight",
    "location.bias",
    "degree.weight",
    "degree.bias",
    "adapter.weight",
];

/// Learned state for one (source tap, target tap) pair.
#[derive(Clone, Debug)]
pub struct PairUnit<T> {
    /// location weight `[1, C_src]`, location bias `[1]`, degree weight
    /// `[C_src, C_src]`, degree bias `[C_src]`, adapter projection
    /// `[C_src, C_tgt]`.
    pub params: Vec<Param<T>>,
    /// Fixed bilinear map from target to source spatial positions,
    /// `[H_src * W_src, H_tgt * W_tgt]`; `None` when the sizes agree.
    pub(crate) resample: Option<Vec<T>>,
}

/// Location and degree networks plus adapters for one transfer direction.
#[derive(Clone, Debug)]
pub struct MetaNetworkPair<T> {
    source_arch: String,
    target_arch: String,
    source_taps: Vec<String>,
    target_taps: Vec<String>,
    source_shapes: Vec<[usize; 3]>,
    target_shapes: Vec<[usize; 3]>,
    /// Source-major: unit `m * target_taps.len() + n`.
    units: Vec<PairUnit<T>>,
}

/// Every (source tap, target tap) combination, source-major.
pub fn candidate_pairs(source: &ArchitectureSpec, target: &ArchitectureSpec) -> Vec<(String, String)> {
    source
        .feature_taps
        .iter()
        .flat_map(|m| target.feature_taps.iter().map(move |n| (m.clone(), n.clone())))
        .collect()
}

/// Row-major `[out_h * out_w, in_h * in_w]` bilinear interpolation matrix
/// with half-pixel centers; samples outside the input are clamped to the edge.
pub fn bilinear_matrix<T: Scalar>(out: [usize; 2], input: [usize; 2]) -> Vec<T> {
    let axis = |o: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..o)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / o as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out[0], input[0]);
    let cols = axis(out[1], input[1]);
    let in_len = input[0] * input[1];
    let mut m = vec![T::zero(); out[0] * out[1] * in_len];
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let row = &mut m[(oy * out[1] + ox) * in_len..][..in_len];
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    row[y * input[1] + x] += T::of(wy * wx);
                }
            }
        }
    }
    m
}

impl<T: Scalar> MetaNetworkPair<T> {
    /// Fresh meta networks: location/degree weights uniform in
    /// `±1/sqrt(C_src)` with zero biases; adapters are the identity when the
    /// channel counts agree and uniform in `±sqrt(3/C_tgt)` otherwise.
    pub fn new(source: &ArchitectureSpec, target: &ArchitectureSpec, seed: u64) -> Result<Self> {
        source.validate()?;
        target.validate()?;
        let source_shapes = source.tap_shapes();
        let target_shapes = target.tap_shapes();
        if source_shapes.is_empty() || target_shapes.is_empty() {
            return Err(Error::domain("both architectures need at least one feature tap"));
        }
        let mut rng = seed::rng(seed);
        let mut uniform = |shape: Vec<usize>, bound: f64| {
            let mut p = Param::zeros(shape);
            for v in p.data.iter_mut() {
                *v = T::of(rng.random_range(-bound..=bound));
            }
            p
        };
        let mut units = Vec::with_capacity(source_shapes.len() * target_shapes.len());
        for s in &source_shapes {
            for t in &target_shapes {
                let (cs, ct) = (s[0], t[0]);
                let bound = 1.0 / (cs as f64).sqrt();
                let loc_w = uniform(vec![1, cs], bound);
                let deg_w = uniform(vec![cs, cs], bound);
                let proj = if cs == ct {
                    let mut p = Param::zeros(vec![cs, ct]);
                    for c in 0..cs {
                        p.data[c * ct + c] = T::one();
                    }
                    p
                } else {
                    uniform(vec![cs, ct], (3.0 / ct as f64).sqrt())
                };
                let resample = (s[1..] != t[1..]).then(|| bilinear_matrix([s[1], s[2]], [t[1], t[2]]));
                units.push(PairUnit {
                    params: vec![loc_w, Param::zeros(vec![1]), deg_w, Param::zeros(vec![cs]), proj],
                    resample,
                });
            }
        }
        Ok(MetaNetworkPair {
            source_arch: source.name.clone(),
            target_arch: target.name.clone(),
            source_taps: source.feature_taps.clone(),
            target_taps: target.feature_taps.clone(),
            source_shapes,
            target_shapes,
            units,
        })
    }

    /// Whether this pair was built for `source -> target`.
    pub fn matches(&self, source: &ArchitectureSpec, target: &ArchitectureSpec) -> bool {
        self.source_arch == source.name
            && self.target_arch == target.name
            && self.source_taps == source.feature_taps
            && self.target_taps == target.feature_taps
            && self.source_shapes == source.tap_shapes()
            && self.target_shapes == target.tap_shapes()
    }

    pub fn direction(&self) -> (&str, &str) {
        (&self.source_arch, &self.target_arch)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.source_taps
            .iter()
            .flat_map(|m| self.target_taps.iter().map(move |n| (m.clone(), n.clone())))
            .collect()
    }

    pub fn num_source_taps(&self) -> usize {
        self.source_taps.len()
    }

    pub fn num_target_taps(&self) -> usize {
        self.target_taps.len()
    }

    pub fn source_shapes(&self) -> &[[usize; 3]] {
        &self.source_shapes
    }

    pub fn target_shapes(&self) -> &[[usize; 3]] {
        &self.target_shapes
    }

    pub fn unit(&self, m: usize, n: usize) -> &PairUnit<T> {
        &self.units[m * self.target_taps.len() + n]
    }

    pub fn unit_mut(&mut self, m: usize, n: usize) -> &mut PairUnit<T> {
        let k = m * self.target_taps.len() + n;
        &mut self.units[k]
    }

    pub fn units(&self) -> &[PairUnit<T>] {
        &self.units
    }

    pub(crate) fn units_mut(&mut self) -> &mut [PairUnit<T>] {
        &mut self.units
    }

    pub fn param_count(&self) -> usize {
        self.units
            .iter()
            .flat_map(|u| &u.params)
            .map(Param::len)
            .sum()
    }

    pub(crate) fn zero_grads(&self) -> Vec<Vec<Vec<T>>> {
        self.units
            .iter()
            .map(|u| u.params.iter().map(|p| vec![T::zero(); p.len()]).collect())
            .collect()
    }

    /// Named tensors, e.g. `res1->pool1.degree.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Param<T>)> {
        self.pairs()
            .into_iter()
            .zip(&self.units)
            .flat_map(|((m, n), u)| {
                SLOT_NAMES
                    .iter()
                    .zip(&u.params)
                    .map(move |(slot, p)| (format!("{m}->{n}.{slot}"), p))
            })
            .collect()
    }

    fn checkpoint_name(&self) -> String {
        format!("{}->{}", self.source_arch, self.target_arch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        checkpoint::encode(&self.checkpoint_name(), &self.named_tensors())
    }

    /// Restore learned values into a pair freshly built for the same direction.
    pub fn load_checkpoint(&mut self, payload: &[u8], manifest: &CheckpointManifest) -> Result<()> {
        if manifest.arch != self.checkpoint_name() {
            return Err(Error::ArchMismatch {
                expected: self.checkpoint_name(),
                actual: manifest.arch.clone(),
            });
        }
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let listed: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        if names.iter().map(String::as_str).ne(listed.iter().copied()) {
            return Err(Error::format("meta checkpoint", "tensor names disagree"));
        }
        let params = checkpoint::decode::<T>(payload, manifest)?;
        let mut it = params.into_iter();
        for u in self.units.iter_mut() {
            for slot in u.params.iter_mut() {
                let p = it.next().expect("count checked by decode");
                if p.shape != slot.shape {
                    return Err(Error::ShapeMismatch {
                        context: "meta checkpoint tensor".into(),
                        expected: slot.shape.clone(),
                        actual: p.shape,
                    });
                }
                *slot = p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch;

    #[test]
    fn bilinear_identity_downsample_and_broadcast() {
        let id: Vec<f64> = bilinear_matrix([2, 2], [2, 2]);
        assert_eq!(id, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);
        // 4 -> 2 along one axis averages neighbouring pairs.
        let down: Vec<f64> = bilinear_matrix([1, 2], [1, 4]);
        assert_eq!(down, vec![0.5, 0.5, 0., 0., 0., 0., 0.5, 0.5]);
        // 1x1 -> 2x2 broadcasts.
        let up: Vec<f64> = bilinear_matrix([2, 2], [1, 1]);
        assert_eq!(up, vec![1.0; 4]);
        // Rows always sum to one.
        let m: Vec<f64> = bilinear_matrix([3, 5], [4, 2]);
        for row in m.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairs_are_the_source_major_product() {
        let l = arch::large([1, 8, 8], 10);
        let s = arch::small([1, 8, 8], 10);
        let pairs = candidate_pairs(&l, &s);
        assert_eq!(pairs.len(), 9);
        assert_eq!(pairs[1], ("res1".to_string(), "pool2".to_string()));
        let meta = MetaNetworkPair::<f32>::new(&l, &s, 0).unwrap();
        assert_eq!(meta.pairs(), pairs);
        assert!(meta.matches(&l, &s));
        assert!(!meta.matches(&s, &l));
    }

    #[test]
    fn checkpoint_round_trip_names_every_unit() {
        let l = arch::large([1, 8, 8], 10);
        let m = arch::medium([1, 8, 8], 10);
        let meta = MetaNetworkPair::<f32>::new(&m, &l, 4).unwrap();
        let ckpt = meta.to_checkpoint();
        assert_eq!(ckpt.manifest.tensors.len(), 9 * 5);
        assert_eq!(ckpt.manifest.tensors[0].name, "pw1_relu->res1.location.weight");
        let mut fresh = MetaNetworkPair::<f32>::new(&m, &l, 5).unwrap();
        fresh.load_checkpoint(&ckpt.payload, &ckpt.manifest).unwrap();
        for (a, b) in fresh.units().iter().zip(meta.units()) {
            assert_eq!(a.params, b.params);
        }
        let mut wrong = MetaNetworkPair::<f32>::new(&l, &m, 5).unwrap();
        assert!(wrong.load_checkpoint(&ckpt.payload, &ckpt.manifest).is_err());
    }
}
