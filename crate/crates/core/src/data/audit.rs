//! Access-audited device shards.
//!
//! Device data is only reachable through [`ShardHandle::open`], which records
//! who asked. The orchestrator opens shards exclusively as the owning device;
//! any server-side read shows up in the [`AuditLog`].

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetView, LabeledDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceId {
    pub type_index: usize,
    pub device_index: usize,
}

/// Identity presented when opening a shard.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reader {
    Device(DeviceId),
    Server(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditEntry {
    pub reader: Reader,
    pub shard: DeviceId,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn new() -> Arc<Self> {
        Arc::new(AuditLog::default())
    }

    fn record(&self, entry: AuditEntry) {
        self.entries.lock().expect("audit log poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit log poisoned").clone()
    }

    pub fn total_reads(&self) -> usize {
        self.entries.lock().expect("audit log poisoned").len()
    }

    /// Reads of any device shard by a server identity.
    pub fn server_reads(&self) -> usize {
        self.entries
            .lock()
            .expect("audit log poisoned")
            .iter()
            .filter(|e| matches!(e.reader, Reader::Server(_)))
            .count()
    }

    /// Reads of a shard by a device other than its owner.
    pub fn foreign_device_reads(&self) -> usize {
        self.entries
            .lock()
            .expect("audit log poisoned")
            .iter()
            .filter(|e| matches!(&e.reader, Reader::Device(d) if *d != e.shard))
            .count()
    }

    pub fn summary(&self) -> AuditSummary {
        AuditSummary {
            total_reads: self.total_reads(),
            server_reads: self.server_reads(),
            foreign_device_reads: self.foreign_device_reads(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub total_reads: usize,
    pub server_reads: usize,
    pub foreign_device_reads: usize,
}

/// One device's private shard.
#[derive(Clone, Debug)]
pub struct ShardHandle {
    owner: DeviceId,
    indices: Vec<usize>,
    log: Arc<AuditLog>,
}

impl ShardHandle {
    pub fn new(owner: DeviceId, indices: Vec<usize>, log: Arc<AuditLog>) -> Self {
        ShardHandle { owner, indices, log }
    }

    pub fn owner(&self) -> DeviceId {
        self.owner
    }

    /// Sample count; metadata the device reports alongside its upload.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn open<'a>(&self, dataset: &'a LabeledDataset, reader: Reader) -> DatasetView<'a> {
        self.log.record(AuditEntry {
            reader,
            shard: self.owner,
        });
        dataset.view_of(self.indices.clone())
    }
}
