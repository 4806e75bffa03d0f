//! Feature-space augmentations.
//!
//! Interpolating policies (mixup, cutmix) produce soft targets; the others
//! perturb features and leave targets alone. Pixel-space policies have no
//! meaning on embeddings, so each is replaced by a 1-D analog: a patch becomes
//! a contiguous coordinate block, photometric chains become scaled noise.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::PROB_TOLERANCE;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Mixup,
    CutmixMask,
    GaussianNoise,
    CutoutMask,
    None,
}

impl AugmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Mixup => "mixup",
            AugmentKind::CutmixMask => "cutmix_mask",
            AugmentKind::GaussianNoise => "gaussian_noise",
            AugmentKind::CutoutMask => "cutout_mask",
            AugmentKind::None => "none",
        }
    }

    /// Whether the policy interpolates labels.
    pub fn soft_labels(self) -> bool {
        matches!(self, AugmentKind::Mixup | AugmentKind::CutmixMask)
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mixup" => AugmentKind::Mixup,
            "cutmix_mask" => AugmentKind::CutmixMask,
            "gaussian_noise" => AugmentKind::GaussianNoise,
            "cutout_mask" => AugmentKind::CutoutMask,
            "none" => AugmentKind::None,
            other => return Err(Error::Config(format!("unknown augmentation kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Beta(alpha, alpha) parameter for mixup and cutmix.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Relative noise scale for `gaussian_noise`.
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    /// Fraction of coordinates zeroed by `cutout_mask`.
    #[serde(default = "defaults::mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "defaults::apply_probability")]
    pub apply_probability: f64,
}

mod defaults {
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn sigma() -> f64 {
        0.1
    }
    pub fn mask_fraction() -> f64 {
        0.25
    }
    pub fn apply_probability() -> f64 {
        1.0
    }
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind) -> Self {
        AugmentPolicy {
            kind,
            alpha: defaults::alpha(),
            sigma: defaults::sigma(),
            mask_fraction: defaults::mask_fraction(),
            apply_probability: defaults::apply_probability(),
        }
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.apply_probability = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        let ok = match self.kind {
            AugmentKind::Mixup | AugmentKind::CutmixMask => {
                self.alpha > 0.0 && self.alpha.is_finite()
            }
            AugmentKind::GaussianNoise => self.sigma > 0.0 && self.sigma.is_finite(),
            AugmentKind::CutoutMask => self.mask_fraction > 0.0 && self.mask_fraction < 1.0,
            AugmentKind::None => true,
        };
        if !ok {
            return Err(Error::Config(format!("invalid parameters for {}: {self:?}", self.kind)));
        }
        Ok(())
    }
}

/// Features plus per-row target distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub features: Array2<f64>,
    pub soft_targets: Array2<f64>,
    pub used_soft_labels: bool,
}

impl AugmentedBatch {
    /// Unaugmented batch with one-hot targets.
    pub fn from_labels(
        features: Array2<f64>,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        let mut soft_targets = Array2::zeros((labels.len(), num_classes));
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Argument(format!("label {y} outside [0, {num_classes})")));
            }
            soft_targets[[i, y]] = 1.0;
        }
        Ok(AugmentedBatch {
            features,
            soft_targets,
            used_soft_labels: false,
        })
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

    pub fn targets_valid(&self) -> bool {
        self.soft_targets
            .rows()
            .into_iter()
            .all(|r| (r.sum() - 1.0).abs() <= PROB_TOLERANCE)
    }
}

/// Per-kind tally of policies that actually fired.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentCounter {
    pub applied: BTreeMap<AugmentKind, u64>,
}

impl AugmentCounter {
    pub fn get(&self, kind: AugmentKind) -> u64 {
        self.applied.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.applied.values().sum()
    }

    pub fn record(&mut self, kind: AugmentKind) {
        *self.applied.entry(kind).or_default() += 1;
    }

    pub fn merge(&mut self, other: &AugmentCounter) {
        for (&k, &v) in &other.applied {
            *self.applied.entry(k).or_default() += v;
        }
    }
}

fn require_pairs(batch: &AugmentedBatch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Argument(format!(
            "interpolating augmentation needs n >= 2, got {}",
            batch.len()
        )));
    }
    Ok(())
}

fn partner_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Row `i` becomes `λ·x_i + (1 − λ)·x_partner[i]`, targets likewise.
pub fn mixup_with(batch: &AugmentedBatch, lambda: f64, partner: &[usize]) -> AugmentedBatch {
    let mix = |m: &Array2<f64>| {
        let mut out = m.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let other = m.row(partner[i]);
            Zip::from(&mut row)
                .and(&other)
                .for_each(|a, &b| *a = lambda * *a + (1.0 - lambda) * b);
        }
        out
    };
    AugmentedBatch {
        features: mix(&batch.features),
        soft_targets: mix(&batch.soft_targets),
        used_soft_labels: true,
    }
}

/// Coordinates `start..start + len` of row `i` are copied from its partner;
/// the partner's target gets weight `len / d`.
pub fn cutmix_with(
    batch: &AugmentedBatch,
    start: usize,
    len: usize,
    partner: &[usize],
) -> AugmentedBatch {
    let d = batch.dim();
    debug_assert!(start + len <= d);
    let weight = len as f64 / d as f64;
    let mut features = batch.features.clone();
    let mut soft_targets = batch.soft_targets.clone();
    for i in 0..batch.len() {
        let j = partner[i];
        for c in start..start + len {
            features[[i, c]] = batch.features[[j, c]];
        }
        if len > 0 {
            let mixed = &batch.soft_targets.row(i) * (1.0 - weight)
                + &batch.soft_targets.row(j) * weight;
            soft_targets.row_mut(i).assign(&mixed);
        }
    }
    AugmentedBatch {
        features,
        soft_targets,
        used_soft_labels: true,
    }
}

fn mixup_rng<R: Rng>(batch: &AugmentedBatch, alpha: f64, rng: &mut R) -> Result<AugmentedBatch> {
    require_pairs(batch)?;
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Argument(format!("mixup alpha {alpha}: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let partner = partner_permutation(batch.len(), rng);
    Ok(mixup_with(batch, lambda, &partner))
}

fn cutmix_rng<R: Rng>(batch: &AugmentedBatch, alpha: f64, rng: &mut R) -> Result<AugmentedBatch> {
    require_pairs(batch)?;
    let d = batch.dim();
    if d < 2 {
        return Err(Error::Argument(format!("cutmix needs d >= 2, got {d}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Argument(format!("cutmix alpha {alpha}: {e}")))?;
    let fraction: f64 = beta.sample(rng);
    let len = ((fraction * d as f64).round() as usize).min(d);
    let start = rng.random_range(0..=d - len);
    let partner = partner_permutation(batch.len(), rng);
    Ok(cutmix_with(batch, start, len, &partner))
}

fn noise_rng<R: Rng>(batch: &AugmentedBatch, sigma: f64, rng: &mut R) -> AugmentedBatch {
    let scale = sigma * noise_reference_scale(batch.features.view());
    let mut out = batch.clone();
    out.features.mapv_inplace(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + scale * z
    });
    out
}

/// Mean row norm divided by `√d`: the typical per-coordinate magnitude.
pub fn noise_reference_scale(features: ArrayView2<f64>) -> f64 {
    let (n, d) = features.dim();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mean_norm = features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / n as f64;
    mean_norm / (d as f64).sqrt()
}

fn cutout_rng<R: Rng>(batch: &AugmentedBatch, mask_fraction: f64, rng: &mut R) -> AugmentedBatch {
    let d = batch.dim();
    let len = ((mask_fraction * d as f64).floor() as usize).min(d);
    let mut out = batch.clone();
    if len == 0 {
        return out;
    }
    for mut row in out.features.rows_mut() {
        let start = rng.random_range(0..=d - len);
        row.slice_mut(ndarray::s![start..start + len]).fill(0.0);
    }
    out
}

pub fn mixup(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    seed: u64,
) -> Result<AugmentedBatch> {
    let batch = AugmentedBatch::from_labels(features.to_owned(), labels, num_classes)?;
    mixup_rng(&batch, alpha, &mut stream_rng(seed, Stream::Augment))
}

pub fn cutmix_mask(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    seed: u64,
) -> Result<AugmentedBatch> {
    let batch = AugmentedBatch::from_labels(features.to_owned(), labels, num_classes)?;
    cutmix_rng(&batch, alpha, &mut stream_rng(seed, Stream::Augment))
}

/// Adds N(0, s²) noise with `s = sigma · mean‖x‖ / √d`.
pub fn gaussian_noise(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    sigma: f64,
    seed: u64,
) -> Result<AugmentedBatch> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let batch = AugmentedBatch::from_labels(features.to_owned(), labels, num_classes)?;
    Ok(noise_rng(&batch, sigma, &mut stream_rng(seed, Stream::Augment)))
}

/// Zeroes `⌊mask_fraction · d⌋` contiguous coordinates per row.
pub fn cutout_mask(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    mask_fraction: f64,
    seed: u64,
) -> Result<AugmentedBatch> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Argument(format!("mask fraction {mask_fraction} outside (0, 1)")));
    }
    let batch = AugmentedBatch::from_labels(features.to_owned(), labels, num_classes)?;
    Ok(cutout_rng(&batch, mask_fraction, &mut stream_rng(seed, Stream::Augment)))
}

/// Applies `policy` with its probability, drawing from `rng`.
pub fn apply_policy_with_rng<R: Rng>(
    policy: &AugmentPolicy,
    batch: AugmentedBatch,
    rng: &mut R,
    counter: &mut AugmentCounter,
) -> Result<AugmentedBatch> {
    policy.validate()?;
    if policy.kind == AugmentKind::None {
        return Ok(batch);
    }
    let draw: f64 = rng.random();
    if draw >= policy.apply_probability {
        return Ok(batch);
    }
    let out = match policy.kind {
        AugmentKind::Mixup => mixup_rng(&batch, policy.alpha, rng)?,
        AugmentKind::CutmixMask => cutmix_rng(&batch, policy.alpha, rng)?,
        AugmentKind::GaussianNoise => noise_rng(&batch, policy.sigma, rng),
        AugmentKind::CutoutMask => cutout_rng(&batch, policy.mask_fraction, rng),
        AugmentKind::None => unreachable!(),
    };
    counter.record(policy.kind);
    Ok(out)
}

pub fn apply_policy(
    policy: &AugmentPolicy,
    batch: AugmentedBatch,
    seed: u64,
    counter: &mut AugmentCounter,
) -> Result<AugmentedBatch> {
    apply_policy_with_rng(policy, batch, &mut stream_rng(seed, Stream::Augment), counter)
}
