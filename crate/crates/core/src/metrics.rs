//! Safety-oriented evaluation: accuracy, mean corruption accuracy (mCA),
//! RMS calibration error and anomaly-detection AUROC.

use std::collections::BTreeMap;

use crate::datamodel::{Corruption, EvalSuite, PredictionSet};
use crate::protocols::AdaptedModel;
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

/// Column headers in report order. RMSE is the only lower-is-better column.
pub const TABLE_COLUMNS: [&str; 5] = ["mCA", "RMSE ↓", "AUROC", "ID Acc.", "OOD Acc."];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub id_acc: f64,
    pub ood_acc: f64,
    pub mca: f64,
    pub rmse_calibration: f64,
    pub auroc_mean: f64,
    pub auroc_per_set: BTreeMap<String, f64>,
    pub per_corruption_acc: BTreeMap<Corruption, f64>,
}

impl MetricsReport {
    /// Values in [`TABLE_COLUMNS`] order.
    pub fn columns(&self) -> [f64; 5] {
        [
            self.mca,
            self.rmse_calibration,
            self.auroc_mean,
            self.id_acc,
            self.ood_acc,
        ]
    }

    /// Markdown table with a single row for this report.
    pub fn to_markdown(&self, protocol: &str) -> String {
        let mut out = format!("| Protocol | {} |\n", TABLE_COLUMNS.join(" | "));
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        let cells: Vec<String> = self.columns().iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!("| {protocol} | {} |\n", cells.join(" | ")));
        out
    }
}

fn require_labels(preds: &PredictionSet) -> Result<&[usize]> {
    preds
        .labels()
        .ok_or_else(|| Error::Argument("metric needs ground-truth labels".into()))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    let labels = require_labels(preds)?;
    if labels.is_empty() {
        return Err(Error::Argument("accuracy over zero rows".into()));
    }
    let correct = preds
        .predicted()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Unweighted mean of per-cell accuracies.
pub fn mean_corruption_accuracy(cells: &BTreeMap<Corruption, PredictionSet>) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::Argument("mCA needs at least one corruption cell".into()));
    }
    let accs = cells.values().map(accuracy).collect::<Result<Vec<_>>>()?;
    Ok(mean(&accs))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// RMS gap between confidence and accuracy over equal-mass confidence bins.
///
/// Rows are sorted by confidence (ties by row index) and cut into `bins`
/// contiguous groups whose sizes differ by at most one, the larger groups
/// first. A boundary falling inside a run of equal confidences is dropped,
/// so tied rows always share a bin. Returns `√(Σ_b (n_b / n)·(mean conf_b − acc_b)²)`.
pub fn rms_calibration_error(preds: &PredictionSet, bins: usize) -> Result<f64> {
    let labels = require_labels(preds)?;
    if bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Argument("calibration over zero rows".into()));
    }
    let confidence = preds.confidence();
    let predicted = preds.predicted();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));

    let base = n / bins;
    let extra = n % bins;
    let mut cuts: Vec<usize> = Vec::with_capacity(bins);
    let mut end = 0;
    for b in 0..bins {
        end += base + usize::from(b < extra);
        // A cut never separates equal confidences.
        let tied = end > 0 && end < n && confidence[order[end - 1]] == confidence[order[end]];
        if end > cuts.last().copied().unwrap_or(0) && !tied {
            cuts.push(end);
        }
    }
    let mut start = 0;
    let mut total = 0.0;
    for end in cuts {
        let members = &order[start..end];
        let size = members.len();
        start = end;
        let conf = members.iter().map(|&i| confidence[i]).sum::<f64>() / size as f64;
        let acc = members.iter().filter(|&&i| predicted[i] == labels[i]).count() as f64 / size as f64;
        total += (size as f64 / n as f64) * (conf - acc).powi(2);
    }
    Ok(total.sqrt())
}

/// Probability that a random ID score exceeds a random anomaly score, ties
/// counting one half, via the Mann–Whitney rank-sum statistic.
pub fn auroc(id_scores: &[f64], anomaly_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || anomaly_scores.is_empty() {
        return Err(Error::Argument("AUROC needs nonempty score vectors".into()));
    }
    if id_scores.iter().chain(anomaly_scores).any(|s| s.is_nan()) {
        return Err(Error::Argument("AUROC scores contain NaN".into()));
    }
    let n = id_scores.len();
    let m = anomaly_scores.len();
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(anomaly_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Rank sums are kept doubled so tied (midrank) values stay integral.
    let mut id_rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let midrank_x2 = (i + j + 2) as u64;
        let id_in_group = pooled[i..=j].iter().filter(|p| p.1).count() as u64;
        id_rank_sum_x2 += midrank_x2 * id_in_group;
        i = j + 1;
    }
    let u_x2 = id_rank_sum_x2 - (n * (n + 1)) as u64;
    Ok(u_x2 as f64 / (2 * n * m) as f64)
}

/// Maximum softmax probability per row; higher means more in-distribution.
pub fn anomaly_score(preds: &PredictionSet) -> Vec<f64> {
    preds.confidence()
}

/// Runs `model` over every member of `suite` and fills a full report.
pub fn evaluate_all(model: &AdaptedModel, suite: &EvalSuite, bins: usize) -> Result<MetricsReport> {
    suite.validate()?;
    let d = model.trunk.input_dim();
    if suite.id_test.dim() != d {
        return Err(Error::Shape(format!(
            "suite has d = {}, model expects {d}",
            suite.id_test.dim()
        )));
    }
    let id = model.predict(&suite.id_test)?;
    let ood = model.predict(&suite.ood_test)?;

    let mut cells = BTreeMap::new();
    for ds in &suite.corrupted {
        let key = ds
            .corruption
            .clone()
            .ok_or_else(|| Error::Invariant(format!("`{}` lacks a corruption tag", ds.name)))?;
        cells.insert(key, model.predict(ds)?);
    }
    let per_corruption_acc = cells
        .iter()
        .map(|(k, p)| Ok((k.clone(), accuracy(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mca = if cells.is_empty() {
        f64::NAN
    } else {
        mean(&per_corruption_acc.values().copied().collect::<Vec<_>>())
    };

    let id_scores = anomaly_score(&id);
    let mut auroc_per_set = BTreeMap::new();
    for ds in &suite.anomaly_sets {
        let scores = anomaly_score(&model.predict(ds)?);
        auroc_per_set.insert(ds.name.clone(), auroc(&id_scores, &scores)?);
    }
    let auroc_mean = if auroc_per_set.is_empty() {
        f64::NAN
    } else {
        mean(&auroc_per_set.values().copied().collect::<Vec<_>>())
    };

    Ok(MetricsReport {
        id_acc: accuracy(&id)?,
        ood_acc: accuracy(&ood)?,
        mca,
        rmse_calibration: rms_calibration_error(&id, bins)?,
        auroc_mean,
        auroc_per_set,
        per_corruption_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn preds(rows: Array2<f64>, labels: Vec<usize>) -> PredictionSet {
        PredictionSet::new(rows, Some(labels)).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let p = preds(array![[0.9, 0.1], [0.2, 0.8]], vec![0, 1]);
        assert_eq!(accuracy(&p).unwrap(), 1.0);
        let tie = preds(array![[0.5, 0.5]], vec![0]);
        assert_eq!(accuracy(&tie).unwrap(), 1.0);
        let p = preds(
            array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]],
            vec![0, 1, 0, 0],
        );
        assert_eq!(accuracy(&p).unwrap(), 0.75);
        let unlabeled = PredictionSet::new(array![[1.0, 0.0]], None).unwrap();
        assert!(matches!(accuracy(&unlabeled), Err(Error::Argument(_))));
    }

    fn cell(family: &str, severity: u8) -> Corruption {
        Corruption {
            family: family.into(),
            severity,
        }
    }

    /// Ten one-hot rows of which `correct` are right.
    fn with_accuracy(correct: usize) -> PredictionSet {
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= correct)).collect();
        preds(Array2::from_shape_fn((10, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 }), labels)
    }

    #[test]
    fn mca_cases() {
        let mut cells = BTreeMap::new();
        cells.insert(cell("gauss", 1), with_accuracy(9));
        cells.insert(cell("gauss", 2), with_accuracy(8));
        cells.insert(cell("mask", 1), with_accuracy(7));
        cells.insert(cell("mask", 2), with_accuracy(6));
        assert!((mean_corruption_accuracy(&cells).unwrap() - 0.75).abs() < 1e-15);
        assert!(mean_corruption_accuracy(&BTreeMap::new()).is_err());
    }

    #[test]
    fn calibration_cases() {
        let perfect = preds(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]);
        assert_eq!(rms_calibration_error(&perfect, 15).unwrap(), 0.0);
        let half = preds(array![[1.0, 0.0], [1.0, 0.0]], vec![0, 1]);
        assert!((rms_calibration_error(&half, 15).unwrap() - 0.5).abs() < 1e-12);
        // Bin 1: confidences 0.6 ×2, one right (acc 0.5); bin 2: 0.9 ×2, both right.
        let two = preds(
            array![[0.6, 0.4], [0.6, 0.4], [0.9, 0.1], [0.1, 0.9]],
            vec![0, 1, 0, 1],
        );
        let got = rms_calibration_error(&two, 2).unwrap();
        assert!((got - 0.1).abs() < 1e-10, "{got}");
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.5, 0.6], &[0.4, 0.5, 0.6]).unwrap(), 0.5);
        let got = auroc(&[0.9, 0.8, 0.7], &[0.85, 0.6]).unwrap();
        assert!((got - 4.0 / 6.0).abs() < 1e-15);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    #[test]
    fn msp_scores() {
        let p = PredictionSet::new(
            ndarray::concatenate![
                ndarray::Axis(0),
                Array2::from_elem((1, 10), 0.1),
                array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]
            ],
            None,
        )
        .unwrap();
        assert_eq!(anomaly_score(&p), vec![0.1, 1.0]);
        let p = PredictionSet::new(array![[0.7, 0.2, 0.1]], None).unwrap();
        assert_eq!(anomaly_score(&p), vec![0.7]);
    }
}
