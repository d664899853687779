//! Checkpoint wire format.
//!
//! Binary payload (all integers little-endian `u32`):
//!
//! | field        | size                |
//! |--------------|---------------------|
//! | magic `HFLW` | 4                   |
//! | version = 1  | 4                   |
//! | name length  | 4                   |
//! | name (UTF-8) | name length         |
//! | tensor count | 4                   |
//! | values       | 4 per parameter, `f32` LE, tensors in manifest order |
//!
//! A sidecar JSON manifest lists every tensor's name and shape. Transmission
//! volume is the payload size plus the manifest size, so a model with `P`
//! parameters costs `4 * P + 16 + name length + manifest length` bytes.
//!
//! Logit payloads use magic `HFLL`: version, rows, columns, then row-major
//! `f32` values, with no manifest (16 header bytes).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerKind};
use super::network::{DeviceModel, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 4] = b"HFLW";
const LOGIT_MAGIC: &[u8; 4] = b"HFLL";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub arch: String,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub payload: Vec<u8>,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    /// Bytes on the wire: payload plus serialized manifest.
    pub fn wire_size(&self) -> usize {
        self.payload.len() + self.manifest.to_json().len()
    }
}

/// Serialize named tensors under `name`.
pub fn encode<T: Scalar>(name: &str, tensors: &[(String, &Param<T>)]) -> Checkpoint {
    let count: usize = tensors.iter().map(|(_, p)| p.len()).sum();
    let mut payload = Vec::with_capacity(16 + name.len() + 4 * count);
    payload.extend_from_slice(MODEL_MAGIC);
    payload.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
    payload.extend_from_slice(name.as_bytes());
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, p) in tensors {
        for v in &p.data {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Checkpoint {
        payload,
        manifest: CheckpointManifest {
            format: CHECKPOINT_VERSION,
            arch: name.to_string(),
            param_count: count,
            tensors: tensors
                .iter()
                .map(|(n, p)| TensorEntry {
                    name: n.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        },
    }
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::format("checkpoint", "truncated header"))?;
    *at = end;
    Ok(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

/// Parse a payload against its manifest.
pub fn decode<T: Scalar>(payload: &[u8], manifest: &CheckpointManifest) -> Result<Vec<Param<T>>> {
    if payload.get(..4) != Some(MODEL_MAGIC.as_slice()) {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut at = 4;
    let version = read_u32(payload, &mut at)?;
    if version != CHECKPOINT_VERSION || manifest.format != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let name_len = read_u32(payload, &mut at)? as usize;
    let name = payload
        .get(at..at + name_len)
        .ok_or_else(|| Error::format("checkpoint", "truncated name"))?;
    if name != manifest.arch.as_bytes() {
        return Err(Error::ArchMismatch {
            expected: manifest.arch.clone(),
            actual: String::from_utf8_lossy(name).into_owned(),
        });
    }
    at += name_len;
    let count = read_u32(payload, &mut at)? as usize;
    if count != manifest.tensors.len() {
        return Err(Error::format("checkpoint", "tensor count disagrees with manifest"));
    }
    let values: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() - at != 4 * values {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} value bytes, found {}", 4 * values, payload.len() - at),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        at += 4 * n;
        params.push(Param {
            shape: t.shape.clone(),
            data,
        });
    }
    Ok(params)
}

/// Stable tensor names for a model's parameters (`<layer>.weight`, ...).
pub fn param_names(arch: &ArchitectureSpec) -> Vec<String> {
    let mut names = Vec::new();
    for l in &arch.layers {
        match l.kind {
            LayerKind::Residual { .. } => {
                for s in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
                    names.push(format!("{}.{s}", l.id));
                }
            }
            ref k if !k.param_shapes().is_empty() => {
                names.push(format!("{}.weight", l.id));
                names.push(format!("{}.bias", l.id));
            }
            _ => {}
        }
    }
    names
}

pub fn encode_model<T: Scalar>(model: &DeviceModel<T>) -> Checkpoint {
    let names = param_names(model.arch());
    let tensors: Vec<(String, &Param<T>)> = names.into_iter().zip(model.params()).collect();
    encode(&model.arch().name, &tensors)
}

pub fn decode_model<T: Scalar>(
    arch: Arc<ArchitectureSpec>,
    payload: &[u8],
    manifest: &CheckpointManifest,
) -> Result<DeviceModel<T>> {
    if manifest.arch != arch.name {
        return Err(Error::ArchMismatch {
            expected: arch.name.clone(),
            actual: manifest.arch.clone(),
        });
    }
    DeviceModel::from_params(arch, decode(payload, manifest)?)
}

/// Write `<path>` (payload) and `<path>.json` (manifest).
pub fn save_model<T: Scalar>(model: &DeviceModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ckpt = encode_model(model);
    fs::write(path, &ckpt.payload)?;
    fs::write(manifest_path(path), ckpt.manifest.to_json())?;
    Ok(())
}

pub fn load_model<T: Scalar>(arch: Arc<ArchitectureSpec>, path: impl AsRef<Path>) -> Result<DeviceModel<T>> {
    let path = path.as_ref();
    let payload = fs::read(path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    decode_model(arch, &payload, &manifest)
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Bytes needed to ship `model`.
pub fn model_bytes<T: Scalar>(model: &DeviceModel<T>) -> usize {
    encode_model(model).wire_size()
}

pub fn encode_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let rows = logits.batch();
    let cols = logits.sample_len();
    let mut out = Vec::with_capacity(16 + 4 * rows * cols);
    out.extend_from_slice(LOGIT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in logits.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out
}

/// Bytes needed to ship a `rows x cols` logit matrix.
pub fn logit_bytes(rows: usize, cols: usize) -> usize {
    16 + 4 * rows * cols
}

#[cfg(test)]
mod tests {
    use super::super::arch;
    use super::*;

    #[test]
    fn model_round_trips_through_payload_and_manifest() {
        let a = Arc::new(arch::medium([1, 8, 8], 10));
        let m = DeviceModel::<f32>::instantiate(a.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&m, &path).unwrap();
        let back: DeviceModel<f32> = load_model(a, &path).unwrap();
        assert_eq!(back.flat(), m.flat());
        let on_disk = fs::metadata(&path).unwrap().len() as usize
            + fs::metadata(dir.path().join("m.ckpt.json")).unwrap().len() as usize;
        assert_eq!(on_disk, model_bytes(&m));
    }

    #[test]
    fn payload_is_header_plus_four_bytes_per_parameter() {
        let a = Arc::new(arch::small([1, 8, 8], 10));
        let m = DeviceModel::<f64>::instantiate(a, 0).unwrap();
        let c = encode_model(&m);
        assert_eq!(c.payload.len(), 16 + "small".len() + 4 * m.param_count());
        assert_eq!(c.manifest.tensors.len(), m.params().len());
    }

    #[test]
    fn empty_logit_batch_is_header_only() {
        let t = Tensor::<f32>::zeros([0, 10, 1, 1]);
        assert_eq!(encode_logits(&t).len(), 16);
        assert_eq!(logit_bytes(0, 10), 16);
        assert_eq!(encode_logits(&Tensor::<f32>::zeros([3, 10, 1, 1])).len(), logit_bytes(3, 10));
    }

    #[test]
    fn rejects_mismatched_architecture() {
        let small = Arc::new(arch::small([1, 8, 8], 10));
        let medium = Arc::new(arch::medium([1, 8, 8], 10));
        let c = encode_model(&DeviceModel::<f32>::instantiate(small, 0).unwrap());
        assert!(matches!(
            decode_model::<f32>(medium, &c.payload, &c.manifest),
            Err(Error::ArchMismatch { .. })
        ));
    }
}
