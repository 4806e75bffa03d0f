//! Executes (protocol, seed) cells and maintains the results CSV.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use adaptlab_core::metrics::evaluate_all;
use adaptlab_core::protocols::{run_protocol, AdaptedModel};
use serde::{Deserialize, Serialize};

use crate::bench::{load_benchmark, Benchmark};
use crate::config::{cell_seed, ExperimentConfig, ProtocolEntry};
use crate::error::{HarnessError, Result};

pub const CSV_HEADER: &str = "protocol,seed,mca,rmse,auroc_mean,id_acc,ood_acc,wall_time_s,config_hash";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: String,
    pub seed: u64,
    pub mca: f64,
    pub rmse: f64,
    pub auroc_mean: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn key(&self) -> (&str, u64, &str) {
        (&self.protocol, self.seed, &self.config_hash)
    }

    /// Metric columns only; wall time differs between otherwise identical runs.
    pub fn metrics(&self) -> [f64; 5] {
        [self.mca, self.rmse, self.auroc_mean, self.id_acc, self.ood_acc]
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(HarnessError::Config(format!(
            "{}: unexpected header `{header}`",
            path.display()
        )));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(csv_err)
}

/// Writes `rows` to a sibling temp file and renames it over `path`, so
/// readers only ever see a complete file.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| HarnessError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut writer = csv::Writer::from_path(&tmp).map_err(|source| HarnessError::Csv {
        path: tmp.clone(),
        source,
    })?;
    let csv_err = |source| HarnessError::Csv {
        path: tmp.clone(),
        source,
    };
    if rows.is_empty() {
        writer
            .write_record(CSV_HEADER.split(','))
            .map_err(csv_err)?;
    }
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer
        .flush()
        .map_err(|e| HarnessError::io(&tmp, e))?;
    drop(writer);
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub workers: usize,
    /// Stop after executing this many cells; simulates an interruption.
    pub max_cells: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            max_cells: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
struct Cell<'a> {
    entry: &'a ProtocolEntry,
    seed: u64,
    hash: String,
}

/// Trains and scores one cell.
pub fn run_cell(bench: &Benchmark, entry: &ProtocolEntry, seed: u64, bins: usize, hash: &str) -> Result<ResultRow> {
    let start = Instant::now();
    let cell = cell_seed(seed, entry.name());
    let spec = entry.spec(cell)?;
    let model = AdaptedModel::new(bench.trunk.clone(), bench.num_classes(), cell)?;
    let (adapted, _) = run_protocol(&spec, &model, &bench.id_train)?;
    let report = evaluate_all(&adapted, &bench.suite, bins)?;
    Ok(ResultRow {
        protocol: entry.name().to_string(),
        seed,
        mca: report.mca,
        rmse: report.rmse_calibration,
        auroc_mean: report.auroc_mean,
        id_acc: report.id_acc,
        ood_acc: report.ood_acc,
        wall_time_s: start.elapsed().as_secs_f64(),
        config_hash: hash.to_string(),
    })
}

/// Config cells first, in protocol-major order, followed by any rows that
/// belong to other configurations in their original order.
fn canonical_order(config: &ExperimentConfig, rows: Vec<ResultRow>) -> Vec<ResultRow> {
    let mut ordered = Vec::with_capacity(rows.len());
    let mut taken = vec![false; rows.len()];
    for entry in &config.protocols {
        let hash = config.cell_hash(entry);
        for &seed in &config.seeds {
            if let Some(i) = rows
                .iter()
                .position(|r| r.key() == (entry.name(), seed, hash.as_str()))
            {
                taken[i] = true;
                ordered.push(rows[i].clone());
            }
        }
    }
    ordered.extend(rows.into_iter().zip(taken).filter(|(_, t)| !t).map(|(r, _)| r));
    ordered
}

/// Runs every missing cell of `config` against the benchmark in `bench` and
/// keeps `out` up to date after each one.
pub fn cmd_run(config: &ExperimentConfig, bench: &Path, out: &Path, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    if options.workers == 0 {
        return Err(HarnessError::Config("--workers must be at least 1".into()));
    }
    let existing = if out.exists() { read_results(out)? } else { Vec::new() };
    let done: BTreeSet<(String, u64, String)> = existing
        .iter()
        .map(|r| (r.protocol.clone(), r.seed, r.config_hash.clone()))
        .collect();

    let mut pending = Vec::new();
    let mut skipped = 0;
    for entry in &config.protocols {
        let hash = config.cell_hash(entry);
        for &seed in &config.seeds {
            if done.contains(&(entry.name().to_string(), seed, hash.clone())) {
                skipped += 1;
            } else {
                pending.push(Cell {
                    entry,
                    seed,
                    hash: hash.clone(),
                });
            }
        }
    }
    if let Some(limit) = options.max_cells {
        pending.truncate(limit);
    }
    if pending.is_empty() {
        if !out.exists() {
            write_results(out, &canonical_order(config, existing))?;
        }
        return Ok(RunSummary { executed: 0, skipped });
    }

    let bench = load_benchmark(config, bench)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }

    let rows = Mutex::new(existing);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<HarnessError>> = Mutex::new(None);
    let executed = AtomicUsize::new(0);

    let worker = || loop {
        if failed.load(Ordering::SeqCst) {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = pending.get(i) else { return };
        let outcome = run_cell(&bench, cell.entry, cell.seed, config.metrics.bins, &cell.hash).and_then(|row| {
            let mut rows = rows.lock().expect("results lock");
            rows.push(row);
            let ordered = canonical_order(config, std::mem::take(&mut *rows));
            let written = write_results(out, &ordered);
            *rows = ordered;
            written
        });
        match outcome {
            Ok(()) => {
                executed.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) => {
                failed.store(true, Ordering::SeqCst);
                first_error.lock().expect("error lock").get_or_insert(e);
                return;
            }
        }
    };

    let workers = options.workers.min(pending.len());
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(worker);
            }
        });
    }
    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(RunSummary {
        executed: executed.into_inner(),
        skipped,
    })
}

/// Default results path inside the configured output directory.
pub fn default_results_path(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("results.csv")
}
