//! Protocol algebra: ordered LP / FT stages over one adapted model.
//!
//! An LP stage trains only the head on frozen trunk features; an FT stage
//! trains trunk and head together. Stages run in order on the same model, so
//! the head leaving stage `k` is exactly the head entering stage `k + 1`.
//!
//! Protocol names follow a small grammar: stage descriptors joined by `+`,
//! each `lp` or `ft` optionally followed by `+<augmentation>` or `+vat`, and
//! parenthesized when it carries modifiers inside a multi-stage protocol:
//! `lp+ft`, `lp+(ft+mixup)`, `(lp+vat)+(ft+augmix-analog)`.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy_with_rng, AugmentCounter, AugmentKind, AugmentPolicy, AugmentedBatch};
use crate::datamodel::{Dataset, PredictionSet};
use crate::nn::{
    backward_trace, forward_trace, init_dense, objective_grad, predictions, sgd_layers, Activation,
    Dense, DenseGrad, InitScheme, Mlp, Objective, OptimConfig, FULL_SCALE_FT_EPOCHS,
    FULL_SCALE_FT_LEARNING_RATE, FULL_SCALE_LP_EPOCHS, FULL_SCALE_LP_LEARNING_RATE,
};
use crate::rng::{mix, stream_rng, Stream};
use crate::vat::{vat_objective_with_rng, VatConfig};
use crate::{linalg, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Lp,
    Ft,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Lp => "lp",
            StageKind::Ft => "ft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub epochs: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: Vec<AugmentPolicy>,
    #[serde(default)]
    pub vat: Option<VatConfig>,
}

impl StageConfig {
    pub fn lp(epochs: usize, learning_rate: f64) -> Self {
        StageConfig {
            kind: StageKind::Lp,
            epochs,
            optim: OptimConfig::new(learning_rate),
            augment: Vec::new(),
            vat: None,
        }
    }

    pub fn ft(epochs: usize, learning_rate: f64) -> Self {
        StageConfig {
            kind: StageKind::Ft,
            ..StageConfig::lp(epochs, learning_rate)
        }
    }

    pub fn with_augment(mut self, policy: AugmentPolicy) -> Self {
        self.augment.push(policy);
        self
    }

    pub fn with_vat(mut self, vat: VatConfig) -> Self {
        self.vat = Some(vat);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        for policy in &self.augment {
            policy.validate()?;
        }
        if let Some(vat) = &self.vat {
            if self.kind != StageKind::Lp {
                return Err(Error::Config("vat only permitted when kind = lp".into()));
            }
            vat.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub seed: u64,
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("protocol `{}` has no stages", self.name)));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    /// Builds the stage list named by `name` from `presets`.
    pub fn from_name(name: &str, presets: &Presets, seed: u64) -> Result<Self> {
        let stages = parse_protocol(name)?
            .iter()
            .map(|d| presets.stage(d))
            .collect::<Result<Vec<_>>>()?;
        let spec = ProtocolSpec {
            name: name.to_string(),
            stages,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-stage hyperparameters used when expanding protocol names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Presets {
    pub lp_epochs: usize,
    pub lp_optim: OptimConfig,
    pub ft_epochs: usize,
    pub ft_optim: OptimConfig,
    pub vat: VatConfig,
    /// Parameter overrides by augmentation kind; kinds not listed use defaults.
    #[serde(default)]
    pub augment: Vec<AugmentPolicy>,
}

impl Presets {
    /// Desk-scale defaults, grid-searched on the default synthetic benchmark.
    pub fn desk() -> Self {
        Presets {
            lp_epochs: 100,
            lp_optim: OptimConfig::new(0.03),
            ft_epochs: 20,
            ft_optim: OptimConfig::new(0.05),
            vat: VatConfig::default(),
            augment: Vec::new(),
        }
    }

    /// Epochs and learning rates of the original large-scale setting.
    pub fn full_scale() -> Self {
        Presets {
            lp_epochs: FULL_SCALE_LP_EPOCHS,
            lp_optim: OptimConfig::new(FULL_SCALE_LP_LEARNING_RATE),
            ft_epochs: FULL_SCALE_FT_EPOCHS,
            ft_optim: OptimConfig::new(FULL_SCALE_FT_LEARNING_RATE),
            ..Presets::desk()
        }
    }

    pub fn policy(&self, kind: AugmentKind) -> AugmentPolicy {
        self.augment
            .iter()
            .find(|p| p.kind == kind)
            .copied()
            .unwrap_or_else(|| AugmentPolicy::new(kind))
    }

    fn stage(&self, descriptor: &StageDescriptor) -> Result<StageConfig> {
        let mut stage = match descriptor.kind {
            StageKind::Lp => StageConfig {
                optim: self.lp_optim,
                ..StageConfig::lp(self.lp_epochs, 1.0)
            },
            StageKind::Ft => StageConfig {
                optim: self.ft_optim,
                ..StageConfig::ft(self.ft_epochs, 1.0)
            },
        };
        for modifier in &descriptor.modifiers {
            match modifier {
                Modifier::Vat => stage.vat = Some(self.vat),
                Modifier::Augment(kind) => stage.augment.push(self.policy(*kind)),
            }
        }
        stage.validate()?;
        Ok(stage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modifier {
    Vat,
    Augment(AugmentKind),
}

/// Protocol-name token for an augmentation, plus accepted aliases.
pub fn augment_token(kind: AugmentKind) -> &'static str {
    match kind {
        AugmentKind::Mixup => "mixup",
        AugmentKind::CutmixMask => "cutmix",
        AugmentKind::GaussianNoise => "noise",
        AugmentKind::CutoutMask => "cutout",
        AugmentKind::None => "none",
    }
}

fn parse_modifier(token: &str) -> Option<Modifier> {
    Some(match token {
        "vat" => Modifier::Vat,
        "mixup" => Modifier::Augment(AugmentKind::Mixup),
        "cutmix" | "cutmix_mask" => Modifier::Augment(AugmentKind::CutmixMask),
        // AugMix and RandAug have no embedding-space meaning; noise and
        // masking stand in for them.
        "noise" | "gaussian_noise" | "augmix-analog" => Modifier::Augment(AugmentKind::GaussianNoise),
        "cutout" | "cutout_mask" | "randaug-analog" => Modifier::Augment(AugmentKind::CutoutMask),
        "none" => Modifier::Augment(AugmentKind::None),
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageDescriptor {
    pub kind: StageKind,
    pub modifiers: Vec<Modifier>,
}

fn parse_kind(token: &str) -> Option<StageKind> {
    match token {
        "lp" => Some(StageKind::Lp),
        "ft" => Some(StageKind::Ft),
        _ => None,
    }
}

fn split_top_level(text: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| Error::Config(format!("unbalanced `)` in `{text}`")))?
            }
            '+' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::Config(format!("unbalanced `(` in `{text}`")));
    }
    parts.push(&text[start..]);
    Ok(parts)
}

/// Parses a protocol name into stage descriptors.
pub fn parse_protocol(name: &str) -> Result<Vec<StageDescriptor>> {
    let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
    let mut stages: Vec<StageDescriptor> = Vec::new();
    for part in split_top_level(&compact)? {
        if part.is_empty() {
            return Err(Error::Config(format!("empty stage descriptor in `{name}`")));
        }
        if let Some(inner) = part.strip_prefix('(').and_then(|p| p.strip_suffix(')')) {
            let mut tokens = inner.split('+');
            let head = tokens.next().unwrap_or_default();
            let kind = parse_kind(head)
                .ok_or_else(|| Error::Config(format!("`{head}` is not a stage kind in `{name}`")))?;
            let modifiers = tokens
                .map(|t| {
                    parse_modifier(t)
                        .ok_or_else(|| Error::Config(format!("unknown modifier `{t}` in `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageDescriptor { kind, modifiers });
        } else if let Some(kind) = parse_kind(part) {
            stages.push(StageDescriptor {
                kind,
                modifiers: Vec::new(),
            });
        } else if let Some(modifier) = parse_modifier(part) {
            let last = stages
                .last_mut()
                .ok_or_else(|| Error::Config(format!("`{name}` starts with a modifier")))?;
            last.modifiers.push(modifier);
        } else {
            return Err(Error::Config(format!("unknown token `{part}` in `{name}`")));
        }
    }
    if stages.is_empty() {
        return Err(Error::Config("empty protocol name".into()));
    }
    Ok(stages)
}

/// Canonical spelling of a stage list.
pub fn format_protocol(stages: &[StageDescriptor]) -> String {
    let render = |s: &StageDescriptor| {
        let mut text = s.kind.to_string();
        for m in &s.modifiers {
            text.push('+');
            text.push_str(match m {
                Modifier::Vat => "vat",
                Modifier::Augment(kind) => augment_token(*kind),
            });
        }
        text
    };
    if stages.len() == 1 {
        return render(&stages[0]);
    }
    stages
        .iter()
        .map(|s| {
            if s.modifiers.is_empty() {
                render(s)
            } else {
                format!("({})", render(s))
            }
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Augmentation tokens used anywhere in a protocol (VAT excluded).
pub fn augment_tokens(name: &str) -> Result<BTreeSet<&'static str>> {
    Ok(parse_protocol(name)?
        .iter()
        .flat_map(|s| s.modifiers.iter())
        .filter_map(|m| match m {
            Modifier::Augment(AugmentKind::None) | Modifier::Vat => None,
            Modifier::Augment(kind) => Some(augment_token(*kind)),
        })
        .collect())
}

/// Augmentations reported for the augmented protocol families.
pub const TABLE_AUGMENTATIONS: [&str; 4] = ["augmix-analog", "randaug-analog", "cutmix", "mixup"];

/// Every protocol that appears as a table row, with desk-scale presets.
pub fn canonical_protocols() -> Vec<ProtocolSpec> {
    let mut names: Vec<String> = ["lp", "ft", "lp+ft", "(lp+vat)+ft"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for aug in TABLE_AUGMENTATIONS {
        names.push(format!("lp+{aug}"));
        names.push(format!("ft+{aug}"));
        names.push(format!("lp+(ft+{aug})"));
        names.push(format!("(lp+{aug})+ft"));
        names.push(format!("(lp+vat)+(ft+{aug})"));
    }
    let presets = Presets::desk();
    names
        .iter()
        .map(|n| ProtocolSpec::from_name(n, &presets, 0).expect("canonical names parse"))
        .collect()
}

/// What happened during one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub kind: StageKind,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub augment: AugmentCounter,
    pub vat_applications: u64,
    pub initial_head: Dense,
    pub final_head: Dense,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub stages: Vec<StageLog>,
}

/// Pretrained trunk plus linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub trunk: Mlp,
    pub head: Dense,
    pub provenance: TrainLog,
}

impl AdaptedModel {
    /// Attaches a freshly initialized head (uniform fan-in) to `trunk`.
    pub fn new(trunk: Mlp, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Argument("a head needs at least one class".into()));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let head = init_dense(trunk.output_dim(), num_classes, InitScheme::UniformFanIn, &mut rng);
        Self::with_head(trunk, head)
    }

    pub fn with_head(trunk: Mlp, head: Dense) -> Result<Self> {
        trunk.validate()?;
        if trunk.output_dim() != head.in_dim() {
            return Err(Error::Shape(format!(
                "trunk emits {} features, head expects {}",
                trunk.output_dim(),
                head.in_dim()
            )));
        }
        Ok(AdaptedModel {
            trunk,
            head,
            provenance: TrainLog::default(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Trunk output for every row of `x`.
    pub fn penultimate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let layers: Vec<&Dense> = self.trunk.layers.iter().collect();
        let mut trace = forward_trace(&layers, &self.trunk.activations(), x)?;
        Ok(trace.outputs.pop().expect("non-empty"))
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.penultimate(x)?;
        self.head.apply(z.view())
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<PredictionSet> {
        let logits = self.logits(dataset.features_f64().view())?;
        predictions(logits.view(), dataset.labels.clone())
    }

    fn full_stack(&self) -> (Vec<&Dense>, Vec<Activation>) {
        let mut layers: Vec<&Dense> = self.trunk.layers.iter().collect();
        layers.push(&self.head);
        let mut acts = self.trunk.activations();
        acts.push(Activation::Identity);
        (layers, acts)
    }
}

fn head_grad(d_logits: &Array2<f64>, z: ArrayView2<f64>) -> DenseGrad {
    DenseGrad {
        weight: linalg::t_dot(d_logits.view(), z),
        bias: linalg::col_sum(d_logits.view()),
    }
}

fn run_stage(
    model: &mut AdaptedModel,
    train: &Dataset,
    stage: &StageConfig,
    seed: u64,
) -> Result<StageLog> {
    stage.validate()?;
    let labels = train.labels()?;
    if train.dim() != model.trunk.input_dim() {
        return Err(Error::Shape(format!(
            "training data has d = {}, trunk expects {}",
            train.dim(),
            model.trunk.input_dim()
        )));
    }
    if train.num_classes != model.num_classes() {
        return Err(Error::Shape(format!(
            "training data has C = {}, head emits {}",
            train.num_classes,
            model.num_classes()
        )));
    }
    if train.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }

    let mut log = StageLog {
        kind: stage.kind,
        epoch_losses: Vec::with_capacity(stage.epochs),
        steps: 0,
        augment: AugmentCounter::default(),
        vat_applications: 0,
        initial_head: model.head.clone(),
        final_head: model.head.clone(),
    };
    if stage.epochs == 0 {
        return Ok(log);
    }

    let x_all = train.features_f64();
    let n = train.len();
    let num_classes = train.num_classes;
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut augment_rng = stream_rng(seed, Stream::Augment);
    let mut vat_rng = stream_rng(seed, Stream::Vat);

    // Frozen trunk and no augmentation: trunk outputs are fixed per row.
    let cached_z = match stage.kind {
        StageKind::Lp if stage.augment.is_empty() => Some(model.penultimate(x_all.view())?),
        _ => None,
    };

    let mut head_velocity = DenseGrad::zeros_like(&model.head);
    let mut full_velocity: Vec<DenseGrad> = match stage.kind {
        StageKind::Ft => model
            .trunk
            .layers
            .iter()
            .chain(std::iter::once(&model.head))
            .map(DenseGrad::zeros_like)
            .collect(),
        StageKind::Lp => Vec::new(),
    };

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..stage.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(stage.optim.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut batch = AugmentedBatch::from_labels(
                x_all.select(Axis(0), chunk),
                &batch_labels,
                num_classes,
            )?;
            for policy in &stage.augment {
                batch = apply_policy_with_rng(policy, batch, &mut augment_rng, &mut log.augment)?;
            }
            let objective = if batch.used_soft_labels {
                Objective::SoftCrossEntropy(batch.soft_targets.view())
            } else {
                Objective::CrossEntropy(&batch_labels)
            };

            let loss = match stage.kind {
                StageKind::Lp => {
                    let z = match &cached_z {
                        Some(z) => z.select(Axis(0), chunk),
                        None => model.penultimate(batch.features.view())?,
                    };
                    let (loss, grad) = match &stage.vat {
                        Some(vat) if vat.alpha > 0.0 => {
                            let step = vat_objective_with_rng(
                                &model.head,
                                z.view(),
                                &objective,
                                vat,
                                &mut vat_rng,
                            )?;
                            log.vat_applications += 1;
                            (step.loss, step.grad)
                        }
                        _ => {
                            let logits = model.head.apply(z.view())?;
                            let (loss, d) = objective_grad(&logits, &objective)?;
                            (loss, head_grad(&d, z.view()))
                        }
                    };
                    sgd_layers(
                        vec![&mut model.head],
                        std::slice::from_ref(&grad),
                        std::slice::from_mut(&mut head_velocity),
                        &stage.optim,
                    )?;
                    loss
                }
                StageKind::Ft => {
                    let (layers, acts) = model.full_stack();
                    let trace = forward_trace(&layers, &acts, batch.features.view())?;
                    let (loss, d_logits) = objective_grad(trace.logits(), &objective)?;
                    let (grads, _) = backward_trace(&layers, &acts, &trace, d_logits, false);
                    let params: Vec<&mut Dense> = model
                        .trunk
                        .layers
                        .iter_mut()
                        .chain(std::iter::once(&mut model.head))
                        .collect();
                    sgd_layers(params, &grads, &mut full_velocity, &stage.optim)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Invariant(format!(
                    "{} stage diverged (loss = {loss}); lower the learning rate",
                    stage.kind
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            log.steps += 1;
        }
        log.epoch_losses.push(epoch_loss / n as f64);
    }
    log.final_head = model.head.clone();
    Ok(log)
}

/// Trains the head only; trunk parameters are untouched.
pub fn run_lp(
    model: &AdaptedModel,
    train: &Dataset,
    stage: &StageConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    if stage.kind != StageKind::Lp {
        return Err(Error::Config(format!("run_lp given a {} stage", stage.kind)));
    }
    let mut out = model.clone();
    let log = run_stage(&mut out, train, stage, seed)?;
    out.provenance.stages.push(log);
    Ok(out)
}

/// Trains trunk and head together.
pub fn run_ft(
    model: &AdaptedModel,
    train: &Dataset,
    stage: &StageConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    if stage.kind != StageKind::Ft {
        return Err(Error::Config(format!("run_ft given a {} stage", stage.kind)));
    }
    let mut out = model.clone();
    let log = run_stage(&mut out, train, stage, seed)?;
    out.provenance.stages.push(log);
    Ok(out)
}

/// Seed for stage `index` of a protocol run.
pub fn stage_seed(protocol_seed: u64, index: usize) -> u64 {
    mix(protocol_seed, index as u64)
}

/// Runs every stage of `spec` in order on one model.
pub fn run_protocol(
    spec: &ProtocolSpec,
    model: &AdaptedModel,
    train: &Dataset,
) -> Result<(AdaptedModel, TrainLog)> {
    spec.validate()?;
    let mut current = model.clone();
    let mut log = TrainLog::default();
    for (k, stage) in spec.stages.iter().enumerate() {
        let seed = stage_seed(spec.seed, k);
        current = match stage.kind {
            StageKind::Lp => run_lp(&current, train, stage, seed)?,
            StageKind::Ft => run_ft(&current, train, stage, seed)?,
        };
        log.stages
            .push(current.provenance.stages.last().expect("stage just ran").clone());
    }
    Ok((current, log))
}
