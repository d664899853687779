//! Procedurally generated classification data for tests and smoke runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{LabeledDataset, SampleId};
use crate::error::Result;
use crate::seed;

/// Each class gets a fixed random prototype image; samples are the prototype
/// plus Gaussian noise of standard deviation `noise`. Labels cycle through the
/// classes so every class has `per_class` samples.
pub fn prototypes(
    per_class: usize,
    num_classes: usize,
    shape: [usize; 3],
    noise: f32,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = seed::rng(seed);
    let per: usize = shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| (0..per).map(|_| rng.random_range(0.0f32..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0f32, noise.max(0.0)).expect("finite noise");
    let n = per_class * num_classes;
    let mut features = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        labels.push(label);
        features.extend(protos[label].iter().map(|&p| p + normal.sample(&mut rng)));
    }
    let ids: Vec<SampleId> = (0..n as SampleId).collect();
    LabeledDataset::new(shape, num_classes, features, labels, ids)
}

/// A features-free dataset (`1x1x1` zero inputs) with the given labels, for
/// exercising partitioning logic at scale.
pub fn labels_only(labels: Vec<usize>, num_classes: usize) -> Result<LabeledDataset> {
    let n = labels.len();
    LabeledDataset::new(
        [1, 1, 1],
        num_classes,
        vec![0.0; n],
        labels,
        (0..n as SampleId).collect(),
    )
}
