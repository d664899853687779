//! Dataset ingestion, non-IID partitioning and audited device shards.

pub mod audit;
mod dataset;
pub mod io;
pub mod partition;
pub mod synthetic;

pub use audit::{AuditLog, AuditSummary, DeviceId, Reader, ShardHandle};
pub use dataset::{DatasetView, LabeledDataset, SampleId};
pub use io::{load_dataset, save_dataset};
pub use partition::{dirichlet_partition, group_partition, label_entropy_bits, sample_public, Partition};
