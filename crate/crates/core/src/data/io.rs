//! On-disk dataset layout.
//!
//! A dataset is a directory holding `index.json` and one raw little-endian
//! data file:
//!
//! ```json
//! {
//!   "format": 1,
//!   "name": "digits",
//!   "num_classes": 10,
//!   "shape": [1, 8, 8],
//!   "dtype": "u8",
//!   "scale": 16.0,
//!   "data": "data.bin",
//!   "labels": [0, 1, 2],
//!   "ids": [0, 1, 2],
//!   "groups": ["dark", "dark", "outdoor"]
//! }
//! ```
//!
//! `dtype` is `u8` or `f32`; each value is divided by `scale` (default 1) on
//! load. `ids` defaults to `0..n` and `groups` is optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, SampleId};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: u32,
    #[serde(default)]
    pub name: String,
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    pub data: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<SampleId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<String>>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)
        .map_err(|e| Error::format("dataset index", e.to_string()))?;
    if index.format != DATASET_FORMAT {
        return Err(Error::format(
            "dataset index",
            format!("unsupported format {}", index.format),
        ));
    }
    let raw = fs::read(dir.join(&index.data))?;
    let per: usize = index.shape.iter().product();
    let n = index.labels.len();
    let width = match index.dtype {
        DType::U8 => 1,
        DType::F32 => 4,
    };
    if raw.len() != n * per * width {
        return Err(Error::format(
            "dataset data",
            format!("expected {} bytes, found {}", n * per * width, raw.len()),
        ));
    }
    let scale = index.scale.unwrap_or(1.0);
    let features: Vec<f32> = match index.dtype {
        DType::U8 => raw.iter().map(|&b| b as f32 / scale).collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) / scale)
            .collect(),
    };
    let ids = index.ids.unwrap_or_else(|| (0..n as SampleId).collect());
    let dataset = LabeledDataset::new(index.shape, index.num_classes, features, index.labels, ids)?;
    match index.groups {
        Some(groups) => dataset.with_groups(groups),
        None => Ok(dataset),
    }
}

/// Write `dataset` as `f32` data with unit scale.
pub fn save_dataset(dataset: &LabeledDataset, name: &str, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let index = DatasetIndex {
        format: DATASET_FORMAT,
        name: name.to_string(),
        num_classes: dataset.num_classes(),
        shape: dataset.input_shape(),
        dtype: DType::F32,
        scale: None,
        data: "data.bin".into(),
        labels: dataset.labels().to_vec(),
        ids: Some(dataset.ids().to_vec()),
        groups: dataset.groups().map(|g| g.to_vec()),
    };
    let bytes: Vec<u8> = dataset
        .features()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(dir.join("data.bin"), bytes)?;
    fs::write(dir.join("index.json"), serde_json::to_string(&index)?)?;
    Ok(())
}
