use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{arch, ArchitectureSpec, TrainingHyperparams};
use crate::wire::LossVariant;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Moss,
    FedavgHomogeneous,
    LogitDistillation,
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A dataset directory (see [`crate::data::load_dataset`]); relative
    /// paths are resolved against the config file's directory.
    Path(PathBuf),
    /// Class prototypes plus Gaussian noise.
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub num_classes: usize,
    pub shape: [usize; 3],
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f32 {
    0.3
}

/// A shipped tier by name, or a full custom architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Named(String),
    Custom(ArchitectureSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierConfig {
    pub arch: ArchChoice,
    pub devices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub samples_per_device: usize,
    pub public_size: usize,
    /// Held-out evaluation samples; 0 uses everything left over.
    #[serde(default)]
    pub test_size: usize,
    /// Draw the public set from another dataset instead of the leftovers.
    #[serde(default)]
    pub public_dataset: Option<DatasetSource>,
}

fn default_alpha() -> f64 {
    0.1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Transfer every type directly into every other type (N^2 transfers).
    pub no_prom: bool,
    pub loss_variant: LossVariant,
    /// Merge proxies with uniform instead of fidelity weights.
    pub no_file: bool,
    /// Fresh meta networks every round.
    pub reinit_meta: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub window: usize,
    pub epsilon: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            window: 3,
            epsilon: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each tier's broadcast model on the shared test set.
    #[default]
    PerTier,
    /// Mean over the tier's participating devices' own models.
    PerDevice,
}

/// The whole experiment, as read from one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Free-form label carried into the summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: Method,
    pub dataset: DatasetSource,
    pub tiers: Vec<TierConfig>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub hp: TrainingHyperparams,
    #[serde(default = "default_wire_epochs")]
    pub wire_epochs: usize,
    #[serde(default = "one")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "one")]
    pub fidelity_exponent: f64,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub evaluation: EvalMode,
    /// Reset every per-type proxy to the merged global proxy after each round.
    #[serde(default = "yes")]
    pub sync_proxies: bool,
}

fn default_rounds() -> usize {
    50
}

fn default_wire_epochs() -> usize {
    5
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Parse and validate; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." {
                missing_field(&inner.to_string()).unwrap_or_else(|| path.clone())
            } else {
                path
            };
            Error::config(field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative dataset paths become relative to it.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |src: &mut DatasetSource| {
            if let DatasetSource::Path(p) = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.dataset);
        if let Some(p) = self.partition.public_dataset.as_mut() {
            fix(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.tiers.is_empty() {
            return Err(Error::config("tiers", "at least one tier is required"));
        }
        for (i, t) in self.tiers.iter().enumerate() {
            if t.devices == 0 {
                return Err(Error::config(format!("tiers[{i}].devices"), "must be positive"));
            }
            if let ArchChoice::Named(name) = &t.arch {
                if arch::tier(name, [1, 8, 8], 2).is_none() {
                    return Err(Error::config(
                        format!("tiers[{i}].arch"),
                        format!("unknown tier `{name}` (expected large, medium or small)"),
                    ));
                }
            }
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config("participation_fraction", "must lie in (0, 1]"));
        }
        self.hp.validate()?;
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::config("partition.alpha", "must be positive"));
        }
        if self.partition.samples_per_device == 0 {
            return Err(Error::config("partition.samples_per_device", "must be positive"));
        }
        if self.method != Method::FedavgHomogeneous && self.partition.public_size == 0 {
            return Err(Error::config("partition.public_size", "server-side transfer needs a public set"));
        }
        if !(self.fidelity_exponent > 0.0 && self.fidelity_exponent.is_finite()) {
            return Err(Error::config("fidelity_exponent", "must be positive"));
        }
        if self.convergence.window == 0 {
            return Err(Error::config("convergence.window", "must be positive"));
        }
        if !(self.convergence.epsilon >= 0.0) {
            return Err(Error::config("convergence.epsilon", "must be non-negative"));
        }
        if self.method == Method::FedavgHomogeneous
            && self.tiers.iter().any(|t| t.arch != self.tiers[0].arch)
        {
            return Err(Error::config("tiers", "homogeneous FedAvg needs one architecture for every tier"));
        }
        Ok(())
    }

    pub fn total_devices(&self) -> usize {
        self.tiers.iter().map(|t| t.devices).sum()
    }

    /// Concrete architectures for a dataset's input shape and class count.
    pub fn architectures(&self, input_shape: [usize; 3], num_classes: usize) -> Result<Vec<ArchitectureSpec>> {
        self.tiers
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let spec = match &t.arch {
                    ArchChoice::Named(name) => arch::tier(name, input_shape, num_classes)
                        .ok_or_else(|| Error::config(format!("tiers[{i}].arch"), format!("unknown tier `{name}`")))?,
                    ArchChoice::Custom(spec) => spec.clone(),
                };
                if spec.input_shape != input_shape || spec.num_classes != num_classes {
                    return Err(Error::config(
                        format!("tiers[{i}].arch"),
                        format!(
                            "architecture `{}` expects {:?} inputs and {} classes; the dataset has {:?} and {}",
                            spec.name, spec.input_shape, spec.num_classes, input_shape, num_classes
                        ),
                    ));
                }
                spec.validate()
                    .map_err(|e| Error::config(format!("tiers[{i}].arch"), e.to_string()))?;
                Ok(spec)
            })
            .collect()
    }

    /// Short label for the method and active ablations, e.g. `moss-no-file`.
    pub fn method_tag(&self) -> String {
        match self.method {
            Method::FedavgHomogeneous => "fedavg-homogeneous".into(),
            Method::LogitDistillation => "logit-distillation".into(),
            Method::Moss => {
                let mut tag = String::from("moss");
                let a = &self.ablation;
                if a.no_prom {
                    tag.push_str("-no-prom");
                }
                match a.loss_variant {
                    LossVariant::Full => {}
                    LossVariant::CeOnly => tag.push_str("-ce-only"),
                    LossVariant::LocationOnly => tag.push_str("-location-only"),
                    LossVariant::CeMse => tag.push_str("-ce-mse"),
                }
                if a.no_file {
                    tag.push_str("-no-file");
                }
                if a.reinit_meta {
                    tag.push_str("-reinit-meta");
                }
                tag
            }
        }
    }

    /// Apply a named ablation switch (as accepted on the command line).
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name.replace('-', "_").as_str() {
            "none" | "full" => self.ablation = Ablation::default(),
            "no_prom" => self.ablation.no_prom = true,
            "no_file" => self.ablation.no_file = true,
            "reinit_meta" => self.ablation.reinit_meta = true,
            "ce_only" => self.ablation.loss_variant = LossVariant::CeOnly,
            "location_only" => self.ablation.loss_variant = LossVariant::LocationOnly,
            "ce_mse" => self.ablation.loss_variant = LossVariant::CeMse,
            other => {
                return Err(Error::config(
                    "ablation",
                    format!("unknown ablation `{other}` (expected no_prom, no_file, reinit_meta, ce_only, location_only or ce_mse)"),
                ))
            }
        }
        Ok(())
    }
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "version": 1,
        "method": "moss",
        "dataset": {"synthetic": {"per_class": 10, "num_classes": 3, "shape": [1, 8, 8]}},
        "tiers": [{"arch": "large", "devices": 2}, {"arch": "small", "devices": 1}],
        "partition": {"samples_per_device": 5, "public_size": 4}
    }"#;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.rounds, 50);
        assert_eq!(cfg.wire_epochs, 5);
        assert_eq!(cfg.hp, TrainingHyperparams::default());
        assert_eq!(cfg.partition.alpha, 0.1);
        assert_eq!(cfg.convergence, ConvergenceConfig { window: 3, epsilon: 0.005 });
        assert_eq!(cfg.total_devices(), 3);
        assert_eq!(cfg.method_tag(), "moss");
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_offending_field() {
        let bad = MINIMAL.replace("\"devices\": 2", "\"devices\": \"two\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "tiers[0].devices"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"public_size\": 4", "\"public_size\": 4, \"colour\": 1");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, message }) => {
                assert!(field.starts_with("partition"), "{field}");
                assert!(message.contains("colour"));
            }
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"method\": \"moss\",", "");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "method"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { field, .. }) if field == "version"));
        let bad = MINIMAL.replace("\"large\"", "\"huge\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { field, .. }) if field == "tiers[0].arch"));
    }

    #[test]
    fn ablation_tags() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.apply_ablation("no-file").unwrap();
        assert_eq!(cfg.method_tag(), "moss-no-file");
        cfg.apply_ablation("ce_mse").unwrap();
        assert_eq!(cfg.method_tag(), "moss-ce-mse-no-file");
        assert!(cfg.apply_ablation("bogus").is_err());
    }
}
