//! Benchmark directories: emitted by `synth`, consumed by `run`.
//!
//! Layout:
//!
//! ```text
//! source.aemb  id_train.aemb  id_test.aemb  ood_test.aemb
//! corrupted/{family}-{severity}.aemb
//! anomaly/{name}.aemb
//! trunk.amdl
//! manifest.txt
//! ```
//!
//! `manifest.txt` has `#` comment lines followed by one tab-separated row per
//! file: role, corruption (`family-severity` or `-`), relative path, n, d, C,
//! seed. For the trunk row n is `-`, d the input width and C the output width.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adaptlab_core::datamodel::{read_embedding_file, write_embedding_file, Corruption, Dataset, EvalSuite, Role};
use adaptlab_core::nn::{read_checkpoint, write_checkpoint, Mlp};
use adaptlab_core::synth::{generate_task, pretrain_for, SynthSpec};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, ExperimentConfig, FileSet};
use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const TRUNK: &str = "trunk.amdl";

/// Digest recorded in the manifest so `run` can refuse a stale benchmark.
pub fn spec_digest(spec: &SynthSpec) -> String {
    let text = serde_json::to_string(spec).expect("spec serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn relative(ds: &Dataset) -> String {
    match ds.role {
        Role::Corrupted => format!("corrupted/{}.aemb", ds.name),
        Role::Anomaly => format!("anomaly/{}.aemb", ds.name),
        _ => format!("{}.aemb", ds.name),
    }
}

/// Generates the benchmark for `spec` under `out`. Rerunning with the same
/// spec rewrites every file byte for byte.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()
        .map_err(|e| HarnessError::Config(format!("dataset.synth: {e}")))?;
    let task = generate_task(spec)?;
    let trunk = pretrain_for(spec, &task)?;

    ensure_dir(&out.join("corrupted"))?;
    ensure_dir(&out.join("anomaly"))?;

    let mut manifest = String::new();
    writeln!(manifest, "# adaptlab benchmark").unwrap();
    writeln!(manifest, "# spec {}", spec_digest(spec)).unwrap();
    writeln!(manifest, "# role\tcorruption\tpath\tn\td\tC\tseed").unwrap();

    let mut written = Vec::new();
    let mut sets: Vec<(&str, &Dataset)> = vec![("source", &task.source), ("id_train", &task.id_train)];
    sets.extend(task.suite.members().map(|ds| (ds.role.as_str(), ds)));
    for (role, ds) in sets {
        let rel = relative(ds);
        let path = out.join(&rel);
        write_embedding_file(ds, &path)?;
        let corruption = ds
            .corruption
            .as_ref()
            .map_or_else(|| "-".to_string(), |c| format!("{}-{}", c.family, c.severity));
        writeln!(
            manifest,
            "{role}\t{corruption}\t{rel}\t{}\t{}\t{}\t{}",
            ds.len(),
            ds.dim(),
            ds.num_classes,
            spec.seed
        )
        .unwrap();
        written.push(path);
    }

    let trunk_path = out.join(TRUNK);
    write_checkpoint(&trunk, &trunk_path)?;
    writeln!(
        manifest,
        "trunk\t-\t{TRUNK}\t-\t{}\t{}\t{}",
        trunk.input_dim(),
        trunk.output_dim(),
        spec.seed
    )
    .unwrap();
    written.push(trunk_path);

    let manifest_path = out.join(MANIFEST);
    fs::write(&manifest_path, manifest).map_err(|e| HarnessError::io(&manifest_path, e))?;
    written.push(manifest_path);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: String,
    pub corruption: Option<Corruption>,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub spec_digest: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

fn parse_corruption(text: &str) -> Option<Corruption> {
    let (family, severity) = text.rsplit_once('-')?;
    Some(Corruption {
        family: family.to_string(),
        severity: severity.parse().ok()?,
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut spec_digest = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(d) = comment.trim().strip_prefix("spec ") {
                spec_digest = Some(d.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(HarnessError::Config(format!(
                "manifest line {}: expected 7 tab-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let corruption = match fields[1] {
            "-" => None,
            tag => Some(parse_corruption(tag).ok_or_else(|| {
                HarnessError::Config(format!("manifest line {}: bad corruption `{tag}`", lineno + 1))
            })?),
        };
        entries.push(ManifestEntry {
            role: fields[0].to_string(),
            corruption,
            path: fields[2].to_string(),
        });
    }
    Ok(Manifest { spec_digest, entries })
}

/// Everything a run needs, loaded once and shared by all cells.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub trunk: Mlp,
    pub id_train: Dataset,
    pub suite: EvalSuite,
}

impl Benchmark {
    pub fn num_classes(&self) -> usize {
        self.id_train.num_classes
    }
}

fn retag(mut ds: Dataset, role: Role, corruption: Option<Corruption>) -> Dataset {
    ds.role = role;
    ds.corruption = corruption;
    ds
}

fn file_set_from_manifest(bench: &Path, spec: &SynthSpec) -> Result<(FileSet, Vec<Option<Corruption>>)> {
    let manifest_path = bench.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        HarnessError::Config(format!(
            "benchmark manifest {} unreadable ({e}); run `synth` first",
            manifest_path.display()
        ))
    })?;
    let manifest = parse_manifest(&text)?;
    let expected = spec_digest(spec);
    if manifest.spec_digest.as_deref() != Some(expected.as_str()) {
        return Err(HarnessError::Config(format!(
            "benchmark at {} was generated from a different synth spec",
            bench.display()
        )));
    }
    let single = |role: &str| -> Result<PathBuf> {
        let mut hits = manifest.entries.iter().filter(|e| e.role == role);
        match (hits.next(), hits.next()) {
            (Some(e), None) => Ok(PathBuf::from(&e.path)),
            _ => Err(HarnessError::Config(format!("manifest needs exactly one `{role}` entry"))),
        }
    };
    let corrupted_entries: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| e.role == "corrupted").collect();
    let files = FileSet {
        id_train: single("id_train")?,
        id_test: single("id_test")?,
        ood_test: single("ood_test")?,
        corrupted: corrupted_entries.iter().map(|e| PathBuf::from(&e.path)).collect(),
        anomaly: manifest
            .entries
            .iter()
            .filter(|e| e.role == "anomaly")
            .map(|e| PathBuf::from(&e.path))
            .collect(),
        trunk: single("trunk")?,
    };
    let tags = corrupted_entries.iter().map(|e| e.corruption.clone()).collect();
    Ok((files, tags))
}

/// Resolves and loads every asset of `config` relative to `bench`. All paths
/// are checked before any file is parsed, so a missing asset is reported as
/// a config error without partial work.
pub fn load_benchmark(config: &ExperimentConfig, bench: &Path) -> Result<Benchmark> {
    let (files, tags) = match &config.dataset {
        DatasetSource::Synth(spec) => file_set_from_manifest(bench, spec)?,
        DatasetSource::Files(files) => {
            let tags = files
                .corrupted
                .iter()
                .map(|p| {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                    stem.as_deref().and_then(parse_corruption).map(Some).ok_or_else(|| {
                        HarnessError::Config(format!(
                            "corrupted file {} must be named `family-severity`",
                            p.display()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (files.clone(), tags)
        }
    };

    let resolve = |p: &Path| bench.join(p);
    let anomaly: Vec<PathBuf> = files
        .anomaly
        .iter()
        .filter(|p| {
            let selection = &config.metrics.anomaly_sets;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            selection.is_empty() || selection.contains(&stem)
        })
        .cloned()
        .collect();
    let mut required: Vec<PathBuf> = vec![
        resolve(&files.id_train),
        resolve(&files.id_test),
        resolve(&files.ood_test),
        resolve(&files.trunk),
    ];
    required.extend(files.corrupted.iter().map(|p| resolve(p)));
    required.extend(anomaly.iter().map(|p| resolve(p)));
    let missing: Vec<String> = required
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::Config(format!("missing benchmark assets: {}", missing.join(", "))));
    }
    if anomaly.len() < config.metrics.anomaly_sets.len() {
        return Err(HarnessError::Config("some selected anomaly sets are not in the benchmark".into()));
    }

    let id_train = retag(read_embedding_file(resolve(&files.id_train))?, Role::IdTrain, None);
    let id_test = retag(read_embedding_file(resolve(&files.id_test))?, Role::IdTest, None);
    let ood_test = retag(read_embedding_file(resolve(&files.ood_test))?, Role::OodTest, None);
    let corrupted = files
        .corrupted
        .iter()
        .zip(tags)
        .map(|(p, tag)| Ok(retag(read_embedding_file(resolve(p))?, Role::Corrupted, tag)))
        .collect::<Result<Vec<_>>>()?;
    let anomaly_sets = anomaly
        .iter()
        .map(|p| Ok(retag(read_embedding_file(resolve(p))?, Role::Anomaly, None)))
        .collect::<Result<Vec<_>>>()?;
    let trunk = read_checkpoint(resolve(&files.trunk))?;

    if id_train.num_classes != id_test.num_classes {
        return Err(HarnessError::Config(format!(
            "id_train has C = {}, id_test has C = {}",
            id_train.num_classes, id_test.num_classes
        )));
    }
    if trunk.input_dim() != id_train.dim() {
        return Err(HarnessError::Config(format!(
            "trunk expects d = {}, datasets have d = {}",
            trunk.input_dim(),
            id_train.dim()
        )));
    }
    let suite = EvalSuite::new(id_test, ood_test, corrupted, anomaly_sets)?;
    Ok(Benchmark { trunk, id_train, suite })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_comments_and_rows() {
        let text = "# header\n# spec abcd\n# role\tcorruption\tpath\tn\td\tC\tseed\n\
                    corrupted\tgauss-3\tcorrupted/gauss-3.aemb\t10\t4\t2\t0\n\
                    trunk\t-\ttrunk.amdl\t-\t4\t3\t0\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.spec_digest.as_deref(), Some("abcd"));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(
            m.entries[0].corruption,
            Some(Corruption {
                family: "gauss".into(),
                severity: 3
            })
        );
        assert_eq!(m.entries[1].corruption, None);
    }

    #[test]
    fn malformed_manifest_rows_are_config_errors() {
        for text in ["a\tb\n", "corrupted\tgauss\tp\t1\t1\t1\t0\n"] {
            assert!(matches!(parse_manifest(text), Err(HarnessError::Config(_))), "{text:?}");
        }
    }

    #[test]
    fn missing_benchmark_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_benchmark(&ExperimentConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{err}");
    }
}
