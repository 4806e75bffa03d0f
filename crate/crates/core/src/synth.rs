//! Desk-scale benchmark with a controlled distribution shift.
//!
//! Classes live in a `k`-dimensional latent space. ID inputs embed the latent
//! point through an orthonormal basis `P_id`; OOD inputs use
//! `P_ood = cos θ·P_id + sin θ·Q` with `Q ⟂ P_id` and an additional mean
//! offset, where both `θ` and the offset grow with `shift_strength`. The
//! class-discriminative subspaces of ID and OOD therefore only partly
//! overlap: fine-tuning that bends the trunk toward `P_id` leaves the `Q`
//! half of OOD inputs mapped by stale features.
//!
//! The source task draws from both geometries with its own set of latent
//! prototypes, so a trunk pretrained on it is a general-purpose extractor
//! for the latent space rather than a solution to the ID task. Source
//! prototypes are compressed along half of the latent axes
//! (`source_minor_scale`), and the trunk ends in a bottleneck no wider than
//! the latent space, so those axes are weakly encoded. Linear probing cannot
//! recover them; fine-tuning can, but only along the ID embedding.
//!
//! Corruption severities are fixed multiples of the dataset's RMS coordinate
//! `ρ = √(mean x²)`:
//!
//! | family    | severity `s` |
//! |-----------|--------------|
//! | `gauss`   | `x + N(0, (0.1·s·ρ)²)` |
//! | `uniform` | `x + U(−0.2·s·ρ, 0.2·s·ρ)` |
//! | `scale`   | `x · (1 ± 0.1·s)`, sign per row |
//! | `mask`    | zero `round(0.05·s·d)` random coordinates per row |
//! | `shift`   | `x + 0.15·s·ρ·√d · u` for one fixed unit `u` |
//!
//! Each family reuses one random pattern across severities, so the mean
//! perturbation norm grows strictly with `s`.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corruption, Dataset, EvalSuite, Role};
use crate::nn::{init_params, Activation, InitScheme, Mlp, OptimConfig};
use crate::protocols::{run_ft, AdaptedModel, StageConfig};
use crate::rng::{hash_str, mix, stream_rng, Stream};
use crate::linalg;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionFamily {
    Gauss,
    Uniform,
    Scale,
    Mask,
    Shift,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 5] = [
        CorruptionFamily::Gauss,
        CorruptionFamily::Uniform,
        CorruptionFamily::Scale,
        CorruptionFamily::Mask,
        CorruptionFamily::Shift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionFamily::Gauss => "gauss",
            CorruptionFamily::Uniform => "uniform",
            CorruptionFamily::Scale => "scale",
            CorruptionFamily::Mask => "mask",
            CorruptionFamily::Shift => "shift",
        }
    }
}

impl FromStr for CorruptionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown corruption family `{s}`")))
    }
}

/// Noise standard deviation of the `gauss` family at severity `s`.
pub fn gauss_sigma(rms: f64, severity: u8) -> f64 {
    0.1 * f64::from(severity) * rms
}

/// Anomaly generators.
pub const ANOMALY_SETS: [&str; 3] = ["gaussian_shell", "uniform_cube", "blob"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub n_source: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub source_classes: usize,
    /// Scale of the OOD rotation angle and mean offset.
    pub shift_strength: f64,
    /// Standard deviation of class prototypes in latent space.
    pub class_separation: f64,
    pub latent_noise: f64,
    /// Scale of source prototypes along the second half of latent axes,
    /// relative to the first half; values below 1 leave those axes weakly
    /// represented by the pretrained trunk.
    pub source_minor_scale: f64,
    /// Isotropic noise added in all input coordinates.
    pub ambient_noise: f64,
    pub corruption_families: Vec<CorruptionFamily>,
    pub severities: u8,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            input_dim: 32,
            num_classes: 5,
            latent_dim: 8,
            trunk_widths: vec![64, 8],
            n_source: 8000,
            n_train: 1000,
            n_test: 1000,
            source_classes: 32,
            shift_strength: 1.5,
            class_separation: 1.3,
            latent_noise: 1.0,
            source_minor_scale: 0.3,
            ambient_noise: 0.1,
            corruption_families: CorruptionFamily::ALL.to_vec(),
            severities: 5,
            pretrain_epochs: 30,
            pretrain_learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("latent_dim", self.latent_dim),
            ("n_source", self.n_source),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("source_classes", self.source_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) {
            return Err(Error::Argument(format!("bad trunk widths {:?}", self.trunk_widths)));
        }
        if 2 * self.latent_dim + 2 > self.input_dim {
            return Err(Error::Argument(format!(
                "input_dim {} too small for two {}-dim subspaces plus offsets",
                self.input_dim, self.latent_dim
            )));
        }
        if !(self.shift_strength >= 0.0) {
            return Err(Error::Argument("shift_strength must be nonnegative".into()));
        }
        if self.severities == 0 {
            return Err(Error::Argument("need at least one severity".into()));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("latent_noise", self.latent_noise),
            ("source_minor_scale", self.source_minor_scale),
            ("ambient_noise", self.ambient_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// OOD rotation angle in radians.
    pub fn rotation(&self) -> f64 {
        (self.shift_strength * PI / 3.0).min(PI / 2.0)
    }

    /// Norm of the OOD mean offset.
    pub fn offset_norm(&self) -> f64 {
        self.shift_strength * 0.5 * self.class_separation
    }

    pub fn dataset_count(&self) -> usize {
        4 + self.corruption_families.len() * usize::from(self.severities) + ANOMALY_SETS.len()
    }
}

/// Generator parameters; exposed so tests can build closed-form oracles.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// `d×k` orthonormal basis of the ID latent embedding.
    pub basis_id: Array2<f64>,
    pub basis_ood: Array2<f64>,
    pub ood_offset: Array1<f64>,
    /// `C×k` class prototypes.
    pub prototypes: Array2<f64>,
    /// `S×k` source-task prototypes.
    pub source_prototypes: Array2<f64>,
    pub latent_noise: f64,
    pub ambient_noise: f64,
}

impl SynthTruth {
    /// Class means in input space for the ID (`ood = false`) or OOD geometry.
    pub fn class_means(&self, ood: bool) -> Array2<f64> {
        let basis = if ood { &self.basis_ood } else { &self.basis_id };
        let mut means = linalg::dot(self.prototypes.view(), basis.t());
        if ood {
            means += &self.ood_offset;
        }
        means
    }
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub source: Dataset,
    pub id_train: Dataset,
    pub suite: EvalSuite,
    pub truth: SynthTruth,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Orthonormal `d×d` basis by modified Gram–Schmidt on a Gaussian matrix.
fn orthonormal_basis(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = gaussian_matrix(d, d, rng);
    for j in 0..d {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

fn to_f32(m: Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

struct Geometry<'a> {
    basis: &'a Array2<f64>,
    offset: Option<&'a Array1<f64>>,
}

fn sample_rows(
    geometry: &Geometry,
    prototypes: &Array2<f64>,
    labels: &[usize],
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n = labels.len();
    let k = spec.latent_dim;
    let d = spec.input_dim;
    let mut latent = gaussian_matrix(n, k, rng) * spec.latent_noise;
    for (mut row, &y) in latent.rows_mut().into_iter().zip(labels) {
        row += &prototypes.row(y);
    }
    let mut x = linalg::dot(latent.view(), geometry.basis.t()) + gaussian_matrix(n, d, rng) * spec.ambient_noise;
    if let Some(offset) = geometry.offset {
        x += offset;
    }
    x
}

/// Labels `0, 1, …, C−1, 0, 1, …` in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn rms(x: &Array2<f64>) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn anomaly_rows(kind: &str, reference: &Array2<f64>, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = reference.ncols();
    let rho = rms(reference);
    match kind {
        // Isotropic directions on a shell three times the typical data norm.
        "gaussian_shell" => {
            let radius = 3.0 * rho * (d as f64).sqrt();
            let mut g = gaussian_matrix(n, d, rng);
            for mut row in g.rows_mut() {
                let norm = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
                row.mapv_inplace(|v| v * radius / norm);
            }
            g
        }
        // Uniform over the bounding cube of the reference data.
        "uniform_cube" => {
            let bound = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Array2::from_shape_simple_fn((n, d), || rng.random_range(-bound..=bound))
        }
        // One tight cluster at a random location of typical norm.
        "blob" => {
            let mut center: Array1<f64> =
                Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut *rng));
            let norm = center.dot(&center).sqrt();
            center.mapv_inplace(|v| v * 1.5 * rho * (d as f64).sqrt() / norm);
            gaussian_matrix(n, d, rng) * (0.2 * rho) + &center
        }
        _ => unreachable!("unknown anomaly generator"),
    }
}

fn corruption_seed(seed: u64, family: CorruptionFamily) -> u64 {
    mix(seed, hash_str(family.as_str()))
}

/// Severity-`severity` corruption of `dataset`; severity 0 is the identity.
pub fn corrupt(dataset: &Dataset, family: CorruptionFamily, severity: u8, seed: u64) -> Result<Dataset> {
    let x = dataset.features_f64();
    let (n, d) = x.dim();
    let s = f64::from(severity);
    let rho = rms(&x);
    let mut rng = stream_rng(corruption_seed(seed, family), Stream::Data);
    let out = match family {
        CorruptionFamily::Gauss => {
            let sigma = gauss_sigma(rho, severity);
            &x + &(gaussian_matrix(n, d, &mut rng) * sigma)
        }
        CorruptionFamily::Uniform => {
            let a = 0.2 * s * rho;
            let pattern = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
            &x + &(pattern * a)
        }
        CorruptionFamily::Scale => {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                row.mapv_inplace(|v| v * (1.0 + sign * 0.1 * s));
            }
            out
        }
        CorruptionFamily::Mask => {
            let count = ((0.05 * s * d as f64).round() as usize).min(d);
            let mut out = x.clone();
            let mut coords: Vec<usize> = (0..d).collect();
            for mut row in out.rows_mut() {
                coords.shuffle(&mut rng);
                for &c in &coords[..count] {
                    row[c] = 0.0;
                }
            }
            out
        }
        CorruptionFamily::Shift => {
            let mut u: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
            let norm = u.dot(&u).sqrt();
            u.mapv_inplace(|v| v / norm * 0.15 * s * rho * (d as f64).sqrt());
            &x + &u
        }
    };
    let (role, corruption) = if severity == 0 {
        (dataset.role, dataset.corruption.clone())
    } else {
        (
            Role::Corrupted,
            Some(Corruption {
                family: family.as_str().to_string(),
                severity,
            }),
        )
    };
    let name = if severity == 0 {
        dataset.name.clone()
    } else {
        format!("{}-{severity}", family.as_str())
    };
    Dataset::new(
        name,
        role,
        corruption,
        to_f32(out),
        dataset.labels.clone(),
        dataset.num_classes,
    )
}

/// Builds the source task, ID training set and full evaluation suite.
pub fn generate_task(spec: &SynthSpec) -> Result<SynthTask> {
    spec.validate()?;
    let d = spec.input_dim;
    let k = spec.latent_dim;
    let c = spec.num_classes;
    let mut rng = stream_rng(spec.seed, Stream::Data);

    let basis = orthonormal_basis(d, &mut rng);
    let basis_id = basis.slice(ndarray::s![.., 0..k]).to_owned();
    let complement = basis.slice(ndarray::s![.., k..2 * k]).to_owned();
    let theta = spec.rotation();
    let basis_ood = &basis_id * theta.cos() + &complement * theta.sin();
    let ood_offset = basis.column(2 * k).to_owned() * spec.offset_norm();

    let prototypes = gaussian_matrix(c, k, &mut rng) * spec.class_separation;
    let mut source_prototypes = gaussian_matrix(spec.source_classes, k, &mut rng) * spec.class_separation;
    source_prototypes
        .slice_mut(ndarray::s![.., k / 2..])
        .mapv_inplace(|v| v * spec.source_minor_scale);

    let id_geom = Geometry {
        basis: &basis_id,
        offset: None,
    };
    let ood_geom = Geometry {
        basis: &basis_ood,
        offset: Some(&ood_offset),
    };

    let labeled = |name: &str, role: Role, x: Array2<f64>, labels: Vec<usize>, classes: usize| {
        Dataset::new(name, role, None, to_f32(x), Some(labels), classes)
    };

    // Source: half ID geometry, half OOD geometry, source labels.
    let src_labels = balanced_labels(spec.n_source, spec.source_classes, &mut rng);
    let half = spec.n_source / 2;
    let src_a = sample_rows(&id_geom, &source_prototypes, &src_labels[..half], spec, &mut rng);
    let src_b = sample_rows(&ood_geom, &source_prototypes, &src_labels[half..], spec, &mut rng);
    let src_x = ndarray::concatenate(Axis(0), &[src_a.view(), src_b.view()]).expect("same width");
    let source = labeled("source", Role::IdTrain, src_x, src_labels, spec.source_classes)?;

    let train_labels = balanced_labels(spec.n_train, c, &mut rng);
    let train_x = sample_rows(&id_geom, &prototypes, &train_labels, spec, &mut rng);
    let id_train = labeled("id_train", Role::IdTrain, train_x, train_labels, c)?;

    let test_labels = balanced_labels(spec.n_test, c, &mut rng);
    let test_x = sample_rows(&id_geom, &prototypes, &test_labels, spec, &mut rng);
    let id_test = labeled("id_test", Role::IdTest, test_x, test_labels, c)?;

    let ood_labels = balanced_labels(spec.n_test, c, &mut rng);
    let ood_x = sample_rows(&ood_geom, &prototypes, &ood_labels, spec, &mut rng);
    let ood_test = labeled("ood_test", Role::OodTest, ood_x, ood_labels, c)?;

    let mut corrupted = Vec::new();
    for &family in &spec.corruption_families {
        for severity in 1..=spec.severities {
            corrupted.push(corrupt(&id_test, family, severity, spec.seed)?);
        }
    }

    let reference = id_test.features_f64();
    let mut anomaly_sets = Vec::new();
    for kind in ANOMALY_SETS {
        let x = anomaly_rows(kind, &reference, spec.n_test, &mut rng);
        anomaly_sets.push(Dataset::new(kind, Role::Anomaly, None, to_f32(x), None, 0)?);
    }

    Ok(SynthTask {
        source,
        id_train,
        suite: EvalSuite::new(id_test, ood_test, corrupted, anomaly_sets)?,
        truth: SynthTruth {
            basis_id,
            basis_ood,
            ood_offset,
            prototypes,
            source_prototypes,
            latent_noise: spec.latent_noise,
            ambient_noise: spec.ambient_noise,
        },
    })
}

/// Trains a trunk plus a throwaway head on `source` and returns the trunk.
pub fn pretrain_trunk(
    source: &Dataset,
    trunk_widths: &[usize],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Mlp> {
    let mut widths = vec![source.dim()];
    widths.extend_from_slice(trunk_widths);
    let trunk = init_params(&widths, Activation::Relu, InitScheme::UniformFanIn, seed)?;
    let model = AdaptedModel::new(trunk, source.num_classes, mix(seed, 1))?;
    let stage = StageConfig {
        optim: OptimConfig::new(learning_rate),
        ..StageConfig::ft(epochs, learning_rate)
    };
    Ok(run_ft(&model, source, &stage, mix(seed, 2))?.trunk)
}

/// Pretrains the trunk described by `spec` on `task.source`.
pub fn pretrain_for(spec: &SynthSpec, task: &SynthTask) -> Result<Mlp> {
    pretrain_trunk(
        &task.source,
        &spec.trunk_widths,
        spec.pretrain_epochs,
        spec.pretrain_learning_rate,
        mix(spec.seed, hash_str("pretrain")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_source: 200,
            n_train: 100,
            n_test: 100,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_counts() {
        let spec = SynthSpec::default();
        assert_eq!(spec.dataset_count(), 1 + 1 + 1 + 1 + 25 + 3);
        let task = generate_task(&small_spec()).unwrap();
        assert_eq!(task.suite.corrupted.len(), 25);
        assert_eq!(task.suite.anomaly_sets.len(), 3);
    }

    #[test]
    fn severity_zero_is_identity() {
        let task = generate_task(&small_spec()).unwrap();
        for family in CorruptionFamily::ALL {
            let same = corrupt(&task.suite.id_test, family, 0, 3).unwrap();
            assert_eq!(same.features, task.suite.id_test.features);
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!("blur".parse::<CorruptionFamily>().is_err());
    }

    #[test]
    fn labels_balanced() {
        let task = generate_task(&SynthSpec {
            n_train: 103,
            ..small_spec()
        })
        .unwrap();
        let mut counts = [0usize; 5];
        for &y in task.id_train.labels().unwrap() {
            counts[y] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }
}
