use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable per-sample identifier.
pub type SampleId = u64;

/// An in-memory labeled classification dataset.
///
/// Inputs are stored as `f32` in sample-major order, each sample shaped
/// `input_shape = [channels, height, width]`.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    input_shape: [usize; 3],
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
    ids: Vec<SampleId>,
    groups: Option<Vec<String>>,
    index_of: HashMap<SampleId, usize>,
}

impl LabeledDataset {
    pub fn new(
        input_shape: [usize; 3],
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
        ids: Vec<SampleId>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::domain("num_classes must be positive"));
        }
        let per = input_shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::domain("input shape has a zero dimension"));
        }
        if features.len() != per * labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset features".into(),
                expected: vec![per * labels.len()],
                actual: vec![features.len()],
            });
        }
        if ids.len() != labels.len() {
            return Err(Error::domain(format!(
                "{} ids for {} samples",
                ids.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut index_of = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index_of.insert(id, i).is_some() {
                return Err(Error::domain(format!("duplicate sample id {id}")));
            }
        }
        Ok(LabeledDataset {
            input_shape,
            num_classes,
            features,
            labels,
            ids,
            groups: None,
            index_of,
        })
    }

    /// Attach a per-sample group tag (e.g. recording environment).
    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(Error::domain(format!(
                "{} group tags for {} samples",
                groups.len(),
                self.len()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[String]> {
        self.groups.as_deref()
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn index_of(&self, id: SampleId) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn sample_features(&self, index: usize) -> &[f32] {
        let per = self.input_shape.iter().product::<usize>();
        &self.features[index * per..(index + 1) * per]
    }

    /// Resolve ids to row indices; unknown ids are a domain error.
    pub fn resolve(&self, ids: &[SampleId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(*id)
                    .ok_or_else(|| Error::domain(format!("unknown sample id {id}")))
            })
            .collect()
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.len()).collect(),
        }
    }

    pub fn view_of(&self, indices: Vec<usize>) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices,
        }
    }

    pub fn view_ids(&self, ids: &[SampleId]) -> Result<DatasetView<'_>> {
        Ok(self.view_of(self.resolve(ids)?))
    }
}

/// A borrowed subset of a dataset, addressed by row index.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    dataset: &'a LabeledDataset,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dataset(&self) -> &'a LabeledDataset {
        self.dataset
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.dataset.input_shape
    }

    pub fn label(&self, position: usize) -> usize {
        self.dataset.labels[self.indices[position]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| self.dataset.labels[i]).collect()
    }

    /// Gather the samples at `positions` (positions within this view) into an
    /// input batch and label vector.
    pub fn batch<T: Scalar>(&self, positions: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.dataset.input_shape;
        let mut data = Vec::with_capacity(positions.len() * c * h * w);
        let mut labels = Vec::with_capacity(positions.len());
        for &p in positions {
            let row = self.indices[p];
            data.extend(
                self.dataset
                    .sample_features(row)
                    .iter()
                    .map(|&v| T::of(v as f64)),
            );
            labels.push(self.dataset.labels[row]);
        }
        let x = Tensor::from_vec([positions.len(), c, h, w], data).expect("batch shape");
        (x, labels)
    }

    /// Whole view as one batch.
    pub fn all<T: Scalar>(&self) -> (Tensor<T>, Vec<usize>) {
        let positions: Vec<usize> = (0..self.len()).collect();
        self.batch(&positions)
    }

    /// Consecutive chunks of at most `size` positions.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |start| (start..(start + size).min(self.len())).collect())
    }
}
