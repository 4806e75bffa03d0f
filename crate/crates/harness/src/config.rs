//! Experiment configuration: one JSON document with the top-level keys
//! `dataset`, `protocols`, `seeds`, `metrics` and `output`.

use std::path::{Path, PathBuf};

use adaptlab_core::augment::AugmentPolicy;
use adaptlab_core::metrics::DEFAULT_BINS;
use adaptlab_core::nn::OptimConfig;
use adaptlab_core::protocols::{Presets, ProtocolSpec};
use adaptlab_core::rng::{hash_str, mix};
use adaptlab_core::synth::{SynthSpec, ANOMALY_SETS};
use adaptlab_core::vat::VatConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Where the benchmark comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated by `synth`; `run` reads the emitted manifest.
    Synth(SynthSpec),
    /// Prepared files, resolved relative to the benchmark directory.
    Files(FileSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSet {
    pub id_train: PathBuf,
    pub id_test: PathBuf,
    pub ood_test: PathBuf,
    /// Corrupted sets; the family and severity come from the file stem `family-s`.
    #[serde(default)]
    pub corrupted: Vec<PathBuf>,
    #[serde(default)]
    pub anomaly: Vec<PathBuf>,
    pub trunk: PathBuf,
}

/// Stage hyperparameter overrides layered on the desk presets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_optim: Option<OptimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ft_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ft_optim: Option<OptimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vat: Option<VatConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augment: Vec<AugmentPolicy>,
}

impl Overrides {
    pub fn apply(&self, base: &Presets) -> Presets {
        let mut presets = base.clone();
        if let Some(v) = self.lp_epochs {
            presets.lp_epochs = v;
        }
        if let Some(v) = self.lp_optim {
            presets.lp_optim = v;
        }
        if let Some(v) = self.ft_epochs {
            presets.ft_epochs = v;
        }
        if let Some(v) = self.ft_optim {
            presets.ft_optim = v;
        }
        if let Some(v) = self.vat {
            presets.vat = v;
        }
        for policy in &self.augment {
            presets.augment.retain(|p| p.kind != policy.kind);
            presets.augment.push(*policy);
        }
        presets
    }
}

/// A protocol name, optionally with overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProtocolEntry {
    Name(String),
    Detailed {
        name: String,
        #[serde(flatten)]
        overrides: Overrides,
    },
}

impl ProtocolEntry {
    pub fn name(&self) -> &str {
        match self {
            ProtocolEntry::Name(n) | ProtocolEntry::Detailed { name: n, .. } => n,
        }
    }

    pub fn presets(&self) -> Presets {
        match self {
            ProtocolEntry::Name(_) => Presets::desk(),
            ProtocolEntry::Detailed { overrides, .. } => overrides.apply(&Presets::desk()),
        }
    }

    pub fn spec(&self, seed: u64) -> Result<ProtocolSpec> {
        Ok(ProtocolSpec::from_name(self.name(), &self.presets(), seed)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Anomaly sets to score; empty means all available.
    #[serde(default)]
    pub anomaly_sets: Vec<String>,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bins: DEFAULT_BINS,
            anomaly_sets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub protocols: Vec<ProtocolEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Protocols run by the default configuration.
pub const DEFAULT_PROTOCOLS: [&str; 5] = ["lp", "ft", "lp+ft", "lp+(ft+mixup)", "(lp+vat)+(ft+mixup)"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synth(SynthSpec::default()),
            protocols: DEFAULT_PROTOCOLS
                .iter()
                .map(|p| ProtocolEntry::Name(p.to_string()))
                .collect(),
            seeds: default_seeds(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching the disk,
    /// including that every protocol name expands.
    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() {
            return Err(HarnessError::Config("at least one protocol is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let mut names: Vec<&str> = self.protocols.iter().map(ProtocolEntry::name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(HarnessError::Config(format!("protocol `{}` listed twice", w[0])));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("duplicate seed".into()));
        }
        if self.metrics.bins == 0 {
            return Err(HarnessError::Config("metrics.bins must be positive".into()));
        }
        for entry in &self.protocols {
            entry
                .spec(0)
                .map_err(|e| HarnessError::Config(format!("protocol `{}`: {e}", entry.name())))?;
        }
        if let DatasetSource::Synth(spec) = &self.dataset {
            spec.validate()
                .map_err(|e| HarnessError::Config(format!("dataset.synth: {e}")))?;
            for name in &self.metrics.anomaly_sets {
                if !ANOMALY_SETS.contains(&name.as_str()) {
                    return Err(HarnessError::Config(format!("unknown anomaly set `{name}`")));
                }
            }
        }
        Ok(())
    }

    /// Digest of everything that determines one protocol's results, apart
    /// from the seed: the dataset, the metric settings and the protocol entry.
    pub fn cell_hash(&self, entry: &ProtocolEntry) -> String {
        let canonical = serde_json::json!({
            "dataset": self.dataset,
            "metrics": self.metrics,
            "protocol": entry,
        });
        // serde_json maps are ordered by key, so this text is canonical.
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Seed of one (protocol, seed) cell; independent of which other protocols run.
pub fn cell_seed(base: u64, protocol: &str) -> u64 {
    mix(base, hash_str(protocol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let config = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn shipped_default_file_matches() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn entries_accept_names_and_overrides() {
        let text = r#"{
            "dataset": {"synth": {"n_train": 50}},
            "protocols": ["lp", {"name": "lp+ft", "ft_epochs": 2, "ft_optim": {"learning_rate": 0.01}}],
            "seeds": [4],
            "metrics": {"bins": 10},
            "output": {"dir": "out"}
        }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        let spec = config.protocols[1].spec(0).unwrap();
        assert_eq!(spec.stages[1].epochs, 2);
        assert_eq!(spec.stages[1].optim.learning_rate, 0.01);
        assert_eq!(spec.stages[1].optim.momentum, 0.9);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"dataset": {"synth": {}}, "protocols": []}"#,
            r#"{"dataset": {"synth": {}}, "protocols": ["lp"], "seeds": []}"#,
            r#"{"dataset": {"synth": {}}, "protocols": ["lp+zoom"]}"#,
            r#"{"dataset": {"synth": {}}, "protocols": ["lp", "lp"]}"#,
            r#"{"dataset": {"synth": {}}, "protocols": ["lp"], "extra": 1}"#,
            r#"{"dataset": {"synth": {"num_classes": 0}}, "protocols": ["lp"]}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert!(matches!(err, HarnessError::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn hash_tracks_only_relevant_fields() {
        let base = ExperimentConfig::default();
        let entry = &base.protocols[0];
        let h = base.cell_hash(entry);
        assert_eq!(h, base.cell_hash(entry));
        assert_eq!(h.len(), 16);

        let more_seeds = ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            ..base.clone()
        };
        assert_eq!(more_seeds.cell_hash(entry), h);

        let mut other = base.clone();
        other.metrics.bins = 10;
        assert_ne!(other.cell_hash(entry), h);
        assert_ne!(base.cell_hash(&base.protocols[1]), h);
    }

    #[test]
    fn cell_seeds_depend_on_protocol_name_only() {
        assert_eq!(cell_seed(0, "lp"), cell_seed(0, "lp"));
        assert_ne!(cell_seed(0, "lp"), cell_seed(0, "ft"));
        assert_ne!(cell_seed(0, "lp"), cell_seed(1, "lp"));
    }
}
