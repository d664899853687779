//! Per-round metrics, run summaries and their on-disk form.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::data::{AuditSummary, DeviceId};
use crate::error::Result;

/// Traffic and training outcome of one participating device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRound {
    pub type_index: usize,
    pub device_index: usize,
    pub bytes_down: usize,
    pub bytes_up: usize,
    /// Mean batch loss per local epoch; empty if training diverged.
    pub local_loss: Vec<f64>,
}

/// Loss trace of one server-side transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTrace {
    /// `forward` (type model into proxy), `backward` (global proxy into type
    /// model), `direct` (type into type without proxies) or `distill`.
    pub stage: String,
    pub source: String,
    pub target: String,
    pub l_final: Vec<f64>,
    pub l_ce: Vec<f64>,
    pub l_location: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy per tier, in `[0, 1]`.
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Proxy fidelity per type (empty for methods without proxies).
    pub fidelity: Vec<f64>,
    /// Weights that merged the proxies into the global proxy.
    pub aggregation_weights: Vec<f64>,
    /// Selected device indices per type.
    pub participants: Vec<Vec<usize>>,
    /// Devices whose local training diverged; left out of aggregation.
    pub dropped: Vec<DeviceId>,
    pub devices: Vec<DeviceRound>,
    pub bytes_down: usize,
    pub bytes_up: usize,
    pub bytes_total: usize,
    pub cumulative_bytes: usize,
    pub transfers: Vec<TransferTrace>,
    pub wire_calls: usize,
}

impl RoundRecord {
    /// Fill the byte totals from the per-device entries.
    pub(crate) fn tally(&mut self, previous_cumulative: usize) {
        self.bytes_down = self.devices.iter().map(|d| d.bytes_down).sum();
        self.bytes_up = self.devices.iter().map(|d| d.bytes_up).sum();
        self.bytes_total = self.bytes_down + self.bytes_up;
        self.cumulative_bytes = previous_cumulative + self.bytes_total;
        self.mean_accuracy = mean(&self.accuracy);
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Earliest round `t` whose next `window` accuracies (itself included) never
/// rise more than `epsilon` above `acc[t]`. `None` if no full window plateaus.
pub fn detect_convergence(history: &[f64], window: usize, epsilon: f64) -> Option<usize> {
    let window = window.max(1);
    (0..history.len())
        .take_while(|t| t + window <= history.len())
        .find(|&t| {
            let peak = history[t..t + window].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            peak - history[t] <= epsilon + 1e-12
        })
}

/// Final outcome of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: Option<String>,
    pub method: Method,
    pub tag: String,
    pub tiers: Vec<String>,
    pub rounds: usize,
    /// Convergence round per tier; `null` when no round ran.
    pub converged: Option<Vec<Option<usize>>>,
    /// Cumulative bytes up to each tier's convergence round.
    pub bytes_to_convergence: Vec<Option<usize>>,
    pub final_accuracy: Vec<f64>,
    pub mean_final_accuracy: Option<f64>,
    pub cumulative_bytes: usize,
    pub wire_calls: usize,
    pub audit: AuditSummary,
}

impl RunSummary {
    pub fn from_records(config: &ExperimentConfig, tiers: Vec<String>, records: &[RoundRecord], audit: AuditSummary) -> Self {
        let (converged, bytes_to_convergence) = if records.is_empty() {
            (None, vec![None; tiers.len()])
        } else {
            let per_tier: Vec<Option<usize>> = (0..tiers.len())
                .map(|i| {
                    let history: Vec<f64> = records.iter().map(|r| r.accuracy[i]).collect();
                    detect_convergence(&history, config.convergence.window, config.convergence.epsilon)
                })
                .collect();
            let bytes = per_tier.iter().map(|c| c.map(|t| records[t].cumulative_bytes)).collect();
            (Some(per_tier), bytes)
        };
        let last = records.last();
        RunSummary {
            name: config.name.clone(),
            method: config.method,
            tag: config.method_tag(),
            tiers,
            rounds: records.len(),
            converged,
            bytes_to_convergence,
            final_accuracy: last.map(|r| r.accuracy.clone()).unwrap_or_default(),
            mean_final_accuracy: last.map(|r| r.mean_accuracy),
            cumulative_bytes: last.map_or(0, |r| r.cumulative_bytes),
            wire_calls: records.iter().map(|r| r.wire_calls).sum(),
            audit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub base: u64,
    pub partition: u64,
    pub public: u64,
    pub test: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub manifest: PathBuf,
    pub partition: PathBuf,
    pub rounds: PathBuf,
    pub summary: PathBuf,
    pub audit: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            manifest: dir.join(MANIFEST_FILE),
            partition: dir.join(PARTITION_FILE),
            rounds: dir.join(ROUNDS_FILE),
            summary: dir.join(SUMMARY_FILE),
            audit: dir.join(AUDIT_FILE),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AUDIT_FILE: &str = "audit.json";

/// What was run, with which seeds, producing which files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: SeedSet,
    pub artifacts: Artifacts,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

pub(crate) fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Write `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_rule_examples() {
        assert_eq!(detect_convergence(&[0.1, 0.2, 0.3, 0.4, 0.5], 3, 0.005), None);
        assert_eq!(detect_convergence(&[0.4; 5], 3, 0.005), Some(0));
        assert_eq!(detect_convergence(&[0.50, 0.60, 0.70, 0.705, 0.702, 0.706], 3, 0.005), Some(2));
        assert_eq!(detect_convergence(&[0.4, 0.4], 3, 0.005), None);
        assert_eq!(detect_convergence(&[], 3, 0.005), None);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
