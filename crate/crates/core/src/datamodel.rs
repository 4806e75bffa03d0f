//! Datasets, evaluation suites, prediction sets and the AEMB embedding file.
//!
//! AEMB layout (little-endian throughout):
//!
//! ```text
//! "AEMB" | version u32 = 1 | n u32 | d u32 | C u32
//! n·d feature values, f32, row-major
//! n labels, u32            (omitted when C = 0, i.e. anomaly sets)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub const AEMB_MAGIC: &[u8; 4] = b"AEMB";
pub const AEMB_VERSION: u32 = 1;
pub const AEMB_HEADER_LEN: usize = 20;

/// Row-sum tolerance for probability rows.
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodTest,
    Anomaly,
    Corrupted,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdTrain => "id_train",
            Role::IdTest => "id_test",
            Role::OodTest => "ood_test",
            Role::Anomaly => "anomaly",
            Role::Corrupted => "corrupted",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "id_train" => Role::IdTrain,
            "id_test" => Role::IdTest,
            "ood_test" => Role::OodTest,
            "anomaly" => Role::Anomaly,
            "corrupted" => Role::Corrupted,
            other => return Err(Error::Argument(format!("unknown dataset role `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub family: String,
    pub severity: u8,
}

/// A labeled (or, for anomaly sets, unlabeled) embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub corruption: Option<Corruption>,
    pub features: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        name: impl Into<String>,
        role: Role,
        corruption: Option<Corruption>,
        features: Array2<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let dataset = Dataset {
            name: name.into(),
            role,
            corruption,
            features,
            labels,
            num_classes,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, _)) = self.features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "dataset `{}` has a non-finite feature at flat index {i}",
                self.name
            )));
        }
        match (&self.labels, self.role) {
            (Some(_), Role::Anomaly) => {
                return Err(Error::Invariant(format!(
                    "anomaly dataset `{}` must not carry labels",
                    self.name
                )))
            }
            (None, role) if role != Role::Anomaly => {
                return Err(Error::Invariant(format!(
                    "{role} dataset `{}` requires labels",
                    self.name
                )))
            }
            _ => {}
        }
        if self.role == Role::Anomaly && self.num_classes != 0 {
            return Err(Error::Invariant(format!(
                "anomaly dataset `{}` must declare C = 0",
                self.name
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.nrows() {
                return Err(Error::Invariant(format!(
                    "dataset `{}` has {} rows but {} labels",
                    self.name,
                    self.features.nrows(),
                    labels.len()
                )));
            }
            if self.num_classes == 0 {
                return Err(Error::Invariant(format!(
                    "labeled dataset `{}` must declare C >= 1",
                    self.name
                )));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::Invariant(format!(
                    "dataset `{}` has label {bad} outside [0, {})",
                    self.name, self.num_classes
                )));
            }
        }
        match (&self.corruption, self.role) {
            (None, Role::Corrupted) => Err(Error::Invariant(format!(
                "corrupted dataset `{}` needs a (family, severity) pair",
                self.name
            ))),
            (Some(_), role) if role != Role::Corrupted => Err(Error::Invariant(format!(
                "{role} dataset `{}` must not carry a corruption tag",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Labels of a labeled dataset; asking an anomaly set for labels is an error.
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| {
            Error::Argument(format!("dataset `{}` ({}) carries no labels", self.name, self.role))
        })
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Rows `indices` in the given order, keeping every other field.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select(ndarray::Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset {
            name: self.name.clone(),
            role: self.role,
            corruption: self.corruption.clone(),
            features,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// The full evaluation battery for one adapted model.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub id_test: Dataset,
    pub ood_test: Dataset,
    pub corrupted: Vec<Dataset>,
    pub anomaly_sets: Vec<Dataset>,
}

impl EvalSuite {
    pub fn new(
        id_test: Dataset,
        ood_test: Dataset,
        corrupted: Vec<Dataset>,
        anomaly_sets: Vec<Dataset>,
    ) -> Result<Self> {
        let suite = EvalSuite {
            id_test,
            ood_test,
            corrupted,
            anomaly_sets,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.id_test.dim();
        let c = self.id_test.num_classes;
        for ds in self.members() {
            ds.validate()?;
            if ds.dim() != d {
                return Err(Error::Shape(format!(
                    "suite member `{}` has d = {}, expected {d}",
                    ds.name,
                    ds.dim()
                )));
            }
        }
        for ds in std::iter::once(&self.ood_test).chain(&self.corrupted) {
            if ds.num_classes != c {
                return Err(Error::Invariant(format!(
                    "suite member `{}` has C = {}, expected {c}",
                    ds.name, ds.num_classes
                )));
            }
        }
        for ds in &self.corrupted {
            if ds.role != Role::Corrupted {
                return Err(Error::Invariant(format!("`{}` is not a corrupted set", ds.name)));
            }
        }
        for ds in &self.anomaly_sets {
            if ds.role != Role::Anomaly {
                return Err(Error::Invariant(format!("`{}` is not an anomaly set", ds.name)));
            }
        }
        Ok(())
    }

    pub fn members(&self) -> impl Iterator<Item = &Dataset> {
        [&self.id_test, &self.ood_test]
            .into_iter()
            .chain(&self.corrupted)
            .chain(&self.anomaly_sets)
    }
}

/// Class-probability rows with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    probs: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl PredictionSet {
    pub fn new(probs: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Invariant(format!("probability row {i} leaves [0, 1]")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Invariant(format!("probability row {i} sums to {sum}")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != probs.nrows() {
                return Err(Error::Shape(format!(
                    "{} probability rows but {} labels",
                    probs.nrows(),
                    l.len()
                )));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= probs.ncols()) {
                return Err(Error::Argument(format!(
                    "label {bad} outside [0, {})",
                    probs.ncols()
                )));
            }
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predicted(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    /// Row maxima.
    pub fn confidence(&self) -> Vec<f64> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

pub fn encode_embedding(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let (n, d) = dataset.features.dim();
    let c = if dataset.labels.is_some() { dataset.num_classes } else { 0 };
    let mut out = Vec::with_capacity(AEMB_HEADER_LEN + 4 * n * d + if c > 0 { 4 * n } else { 0 });
    out.extend_from_slice(AEMB_MAGIC);
    for field in [AEMB_VERSION, to_u32(n, "n")?, to_u32(d, "d")?, to_u32(c, "C")?] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for row in dataset.features.rows() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &dataset.labels {
        for &y in labels {
            out.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} = {v} does not fit in u32")))
}

/// Writes `dataset` as AEMB. Invariants are checked before anything touches disk.
pub fn write_embedding_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embedding(dataset)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field, "truncated payload"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self, field: &'static str) -> Result<f32> {
        let b = self.take(4, field)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Parses AEMB bytes. Labeled files come back as `id_train`, unlabeled ones
/// (C = 0) as `anomaly`; callers that know better re-tag the role.
pub fn decode_embedding(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != AEMB_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = r.u32("version")?;
    if version != AEMB_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let n = r.u32("n")? as usize;
    let d = r.u32("d")? as usize;
    let c = r.u32("C")? as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::format("d", "n·d overflows"))?;
    let mut features = Vec::with_capacity(count.min(bytes.len() / 4));
    for _ in 0..count {
        let v = r.f32("features")?;
        if !v.is_finite() {
            return Err(Error::format("features", "non-finite feature value"));
        }
        features.push(v);
    }
    let labels = if c > 0 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = r.u32("labels")? as usize;
            if y >= c {
                return Err(Error::format("labels", format!("label out of range: {y} >= C = {c}")));
            }
            labels.push(y);
        }
        Some(labels)
    } else {
        None
    };
    r.finish()?;
    let features = Array2::from_shape_vec((n, d), features).expect("length checked above");
    let role = if labels.is_some() { Role::IdTrain } else { Role::Anomaly };
    Dataset::new(name, role, None, features, labels, c)
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_embedding(&bytes, &name)
}

/// Stratified split into `(first, second)`.
///
/// The second part receives `⌊(1 − fraction)·n⌋` rows overall, shared across
/// classes by largest remainder of their proportional quota; every remaining
/// row goes to the first part. Rows keep their original relative order.
pub fn split_dataset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Argument(format!("cannot split {n} rows")));
    }
    // ceil(f·n) with a guard against representation error (0.9·10 = 9.000…01).
    let scaled = fraction * n as f64;
    let first_total = if (scaled - scaled.round()).abs() < 1e-9 {
        scaled.round() as usize
    } else {
        scaled.ceil() as usize
    };
    let second_total = n - first_total.min(n);
    if second_total == 0 || second_total == n {
        return Err(Error::Argument(format!(
            "fraction {fraction} on {n} rows leaves an empty part"
        )));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match &dataset.labels {
        Some(labels) => labels
            .iter()
            .enumerate()
            .for_each(|(i, &y)| by_class.entry(y).or_default().push(i)),
        None => {
            by_class.insert(0, (0..n).collect());
        }
    }

    // Largest-remainder apportionment of the second part.
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, rows)| {
            let exact = second_total as f64 * rows.len() as f64 / n as f64;
            let floor = exact.floor() as usize;
            (c, floor, exact - floor as f64)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &k in order.iter().take(second_total - assigned) {
        quotas[k].1 += 1;
    }

    let mut rng = stream_rng(seed, Stream::Shuffle);
    let mut first = Vec::with_capacity(n - second_total);
    let mut second = Vec::with_capacity(second_total);
    for (class, take) in quotas.iter().map(|&(c, t, _)| (c, t)) {
        let mut rows = by_class[&class].clone();
        rows.shuffle(&mut rng);
        second.extend_from_slice(&rows[..take]);
        first.extend_from_slice(&rows[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((dataset.select(&first), dataset.select(&second)))
}
