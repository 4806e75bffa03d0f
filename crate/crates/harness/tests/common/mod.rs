#![allow(dead_code)]

use std::path::Path;

use adaptlab::config::{DatasetSource, ExperimentConfig, Overrides, ProtocolEntry};
use adaptlab::run::ResultRow;
use adaptlab_core::synth::{CorruptionFamily, SynthSpec};

pub fn small_spec() -> SynthSpec {
    SynthSpec {
        n_source: 600,
        n_train: 200,
        n_test: 200,
        pretrain_epochs: 3,
        corruption_families: vec![CorruptionFamily::Gauss, CorruptionFamily::Mask],
        severities: 2,
        ..SynthSpec::default()
    }
}

/// Protocol entry with short schedules so whole sweeps take well under a second.
pub fn quick(name: &str) -> ProtocolEntry {
    ProtocolEntry::Detailed {
        name: name.to_string(),
        overrides: Overrides {
            lp_epochs: Some(5),
            ft_epochs: Some(2),
            ..Overrides::default()
        },
    }
}

pub fn small_config(protocols: &[&str], seeds: &[u64]) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synth(small_spec()),
        protocols: protocols.iter().map(|p| quick(p)).collect(),
        seeds: seeds.to_vec(),
        ..ExperimentConfig::default()
    }
}

/// Metric columns plus the row key; wall time is excluded.
pub fn metric_view(rows: &[ResultRow]) -> Vec<(String, u64, String, [u64; 5])> {
    rows.iter()
        .map(|r| {
            (
                r.protocol.clone(),
                r.seed,
                r.config_hash.clone(),
                r.metrics().map(f64::to_bits),
            )
        })
        .collect()
}

pub fn dir_snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
