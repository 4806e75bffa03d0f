//! Dense layers, softmax, losses and SGD with closed-form gradients.
//!
//! There is no autodiff graph: a forward pass records each layer's input and
//! post-activation output, and the backward pass walks that trace in reverse.
//! All three objectives share the same logit gradient shape, `(p − t) / n`,
//! where `t` is the one-hot label, the soft target or the KL reference.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{PredictionSet, Reader, PROB_TOLERANCE};
use crate::linalg;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

pub const AMDL_MAGIC: &[u8; 4] = b"AMDL";
pub const AMDL_VERSION: u32 = 1;

/// Learning rate of the linear-probe stage at full scale.
pub const FULL_SCALE_LP_LEARNING_RATE: f64 = 30.0;
pub const FULL_SCALE_LP_EPOCHS: usize = 200;
/// Learning rate of the fine-tuning stage at full scale.
pub const FULL_SCALE_FT_LEARNING_RATE: f64 = 1e-5;
pub const FULL_SCALE_FT_EPOCHS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            other => return Err(Error::format("activation", format!("unknown tag {other}"))),
        })
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(linalg::affine(x, self.weight.view(), &self.bias))
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Multilayer perceptron; `activation` follows every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        let mlp = Mlp { layers, activation };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::Shape(format!(
                    "layer {} expects {} inputs but layer {k} emits {}",
                    k + 1,
                    pair[1].in_dim(),
                    pair[0].out_dim()
                )));
            }
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!("layer {k} bias length mismatch")));
            }
            if !layer.is_finite() {
                return Err(Error::Invariant(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// `[in, hidden…, out]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub(crate) fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![self.activation; self.layers.len()];
        *acts.last_mut().expect("non-empty") = Activation::Identity;
        acts
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrad {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub(crate) fn congruent(&self, layer: &Dense) -> bool {
        self.weight.dim() == layer.weight.dim() && self.bias.len() == layer.bias.len()
    }

    pub(crate) fn add_scaled(&mut self, other: &DenseGrad, scale: f64) {
        self.weight.scaled_add(scale, &other.weight);
        self.bias.scaled_add(scale, &other.bias);
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(self.bias.iter()).copied()
    }
}

/// One [`DenseGrad`] per layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients {
            layers: model.layers.iter().map(DenseGrad::zeros_like).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(DenseGrad::values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Momentum buffers, shape-congruent with the model they update.
pub type MomentumState = Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    128
}

impl OptimConfig {
    pub fn new(learning_rate: f64) -> Self {
        OptimConfig {
            learning_rate,
            momentum: default_momentum(),
            batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Training objective and its targets.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Mean `−log p[y]`.
    CrossEntropy(&'a [usize]),
    /// Mean `−Σ q log p`; rows of `q` must sum to one.
    SoftCrossEntropy(ArrayView2<'a, f64>),
    /// Mean `KL(r ‖ p)` against a fixed reference distribution `r`.
    KlToReference(ArrayView2<'a, f64>),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Input to the final layer.
    pub penultimate: Array2<f64>,
    /// Pre-softmax scores.
    pub logits: Array2<f64>,
}

pub fn forward(model: &Mlp, x: ArrayView2<f64>) -> Result<ForwardOutput> {
    let layers: Vec<&Dense> = model.layers.iter().collect();
    let mut trace = forward_trace(&layers, &model.activations(), x)?;
    let logits = trace.outputs.pop().expect("non-empty");
    let penultimate = trace.inputs.pop().expect("non-empty");
    Ok(ForwardOutput {
        penultimate,
        logits,
    })
}

/// Layer inputs and post-activation outputs of one forward pass.
pub(crate) struct Trace {
    pub inputs: Vec<Array2<f64>>,
    pub outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty")
    }
}

pub(crate) fn forward_trace(
    layers: &[&Dense],
    acts: &[Activation],
    x: ArrayView2<f64>,
) -> Result<Trace> {
    debug_assert_eq!(layers.len(), acts.len());
    let mut inputs = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len());
    let mut current = x.to_owned();
    for (layer, &act) in layers.iter().zip(acts) {
        let mut out = layer.apply(current.view())?;
        if act != Activation::Identity {
            out.mapv_inplace(|z| act.apply(z));
        }
        inputs.push(current);
        current = out.clone();
        outputs.push(out);
    }
    Ok(Trace { inputs, outputs })
}

/// Backpropagates `d_out` (gradient at the last layer's output) through a trace.
pub(crate) fn backward_trace(
    layers: &[&Dense],
    acts: &[Activation],
    trace: &Trace,
    d_out: Array2<f64>,
    want_input_grad: bool,
) -> (Vec<DenseGrad>, Option<Array2<f64>>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = d_out;
    let mut input_grad = None;
    for k in (0..layers.len()).rev() {
        if acts[k] != Activation::Identity {
            let act = acts[k];
            Zip::from(&mut delta)
                .and(&trace.outputs[k])
                .for_each(|d, &y| *d *= act.derivative_from_output(y));
        }
        let weight = linalg::t_dot(delta.view(), trace.inputs[k].view());
        let bias = linalg::col_sum(delta.view());
        grads.push(DenseGrad { weight, bias });
        if k > 0 || want_input_grad {
            let next = linalg::dot(delta.view(), layers[k].weight.view());
            if k == 0 {
                input_grad = Some(next);
                break;
            }
            delta = next;
        }
    }
    grads.reverse();
    (grads, input_grad)
}

/// Loss value and its gradient with respect to the logits.
fn ensure_finite_logits(logits: ArrayView2<f64>) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invariant("non-finite logits; training diverged".into()))
    }
}

pub(crate) fn objective_grad(
    logits: &Array2<f64>,
    objective: &Objective,
) -> Result<(f64, Array2<f64>)> {
    ensure_finite_logits(logits.view())?;
    let probs = softmax(logits.view());
    let n = probs.nrows();
    if n == 0 {
        return Err(Error::Shape("objective over zero rows".into()));
    }
    let (loss, target) = match objective {
        Objective::CrossEntropy(labels) => {
            let loss = cross_entropy(&probs, labels)?;
            let mut onehot = Array2::zeros(probs.raw_dim());
            for (i, &y) in labels.iter().enumerate() {
                onehot[[i, y]] = 1.0;
            }
            (loss, onehot)
        }
        Objective::SoftCrossEntropy(q) => (soft_cross_entropy(&probs, q)?, q.to_owned()),
        Objective::KlToReference(r) => {
            check_same_shape(&probs, r, "KL reference")?;
            let mut total = 0.0;
            for (p, q) in probs.rows().into_iter().zip(r.rows()) {
                total += kl_terms(q.iter().copied(), p.iter().copied());
            }
            (total / n as f64, r.to_owned())
        }
    };
    let scale = 1.0 / n as f64;
    let mut grad = probs;
    Zip::from(&mut grad)
        .and(&target)
        .for_each(|g, &t| *g = (*g - t) * scale);
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: Gradients,
    pub loss: f64,
    /// Gradient of the mean loss with respect to the input rows, on request.
    pub input_grad: Option<Array2<f64>>,
}

/// Exact gradients of the mean objective with respect to every parameter.
pub fn backward(
    model: &Mlp,
    x: ArrayView2<f64>,
    objective: &Objective,
    want_input_grad: bool,
) -> Result<Backward> {
    let layers: Vec<&Dense> = model.layers.iter().collect();
    let acts = model.activations();
    let trace = forward_trace(&layers, &acts, x)?;
    let (loss, d_logits) = objective_grad(trace.logits(), objective)?;
    let (grads, input_grad) = backward_trace(&layers, &acts, &trace, d_logits, want_input_grad);
    Ok(Backward {
        grads: Gradients { layers: grads },
        loss,
        input_grad,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn predictions(logits: ArrayView2<f64>, labels: Option<Vec<usize>>) -> Result<PredictionSet> {
    ensure_finite_logits(logits)?;
    PredictionSet::new(softmax(logits), labels)
}

fn check_same_shape(a: &Array2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what} has shape {:?}, probabilities {:?}",
            b.dim(),
            a.dim()
        )));
    }
    Ok(())
}

pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.nrows()
        )));
    }
    let c = probs.ncols();
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= c {
            return Err(Error::Argument(format!("label {y} outside [0, {c})")));
        }
        total -= row[y].max(PROB_CLAMP).ln();
    }
    Ok(total / probs.nrows() as f64)
}

pub fn soft_cross_entropy(probs: &Array2<f64>, targets: &ArrayView2<f64>) -> Result<f64> {
    check_same_shape(probs, targets, "soft targets")?;
    let mut total = 0.0;
    for (i, (p, q)) in probs.rows().into_iter().zip(targets.rows()).enumerate() {
        let sum = q.sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::Argument(format!("soft target row {i} sums to {sum}")));
        }
        for (&pc, &qc) in p.iter().zip(q.iter()) {
            if qc != 0.0 {
                total -= qc * pc.max(PROB_CLAMP).ln();
            }
        }
    }
    Ok(total / probs.nrows() as f64)
}

fn kl_terms(p: impl Iterator<Item = f64>, q: impl Iterator<Item = f64>) -> f64 {
    p.zip(q)
        .filter(|&(pc, _)| pc > 0.0)
        .map(|(pc, qc)| pc * (pc.ln() - qc.max(PROB_CLAMP).ln()))
        .sum()
}

/// `KL(p ‖ q)` in nats with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL over lengths {} and {}", p.len(), q.len())));
    }
    Ok(kl_terms(p.iter().copied(), q.iter().copied()).max(0.0))
}

/// `v ← μ·v + g; θ ← θ − lr·v` over paired layers.
pub(crate) fn sgd_layers(
    layers: Vec<&mut Dense>,
    grads: &[DenseGrad],
    velocity: &mut [DenseGrad],
    config: &OptimConfig,
) -> Result<()> {
    if layers.len() != grads.len() || grads.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} layers, {} gradients, {} momentum buffers",
            layers.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((layer, g), v) in layers.into_iter().zip(grads).zip(velocity.iter_mut()) {
        if !g.congruent(layer) || !v.congruent(layer) {
            return Err(Error::Shape("gradient not congruent with its layer".into()));
        }
        let mu = config.momentum;
        let lr = config.learning_rate;
        Zip::from(&mut layer.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|w, v, &g| {
                *v = mu * *v + g;
                *w -= lr * *v;
            });
        Zip::from(&mut layer.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|b, v, &g| {
                *v = mu * *v + g;
                *b -= lr * *v;
            });
    }
    Ok(())
}

pub fn sgd_step(
    model: &mut Mlp,
    grads: &Gradients,
    state: &mut MomentumState,
    config: &OptimConfig,
) -> Result<()> {
    sgd_layers(
        model.layers.iter_mut().collect(),
        &grads.layers,
        &mut state.layers,
        config,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases uniform in `±1/√fan_in`.
    #[default]
    UniformFanIn,
    Zeros,
}

pub(crate) fn init_dense<R: Rng>(
    in_dim: usize,
    out_dim: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Dense {
    match scheme {
        InitScheme::Zeros => Dense::zeros(in_dim, out_dim),
        InitScheme::UniformFanIn => {
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || {
                rng.random_range(-bound..bound)
            });
            let bias = Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound));
            Dense { weight, bias }
        }
    }
}

/// Fresh MLP over the width chain `[in, hidden…, out]`.
pub fn init_params(
    widths: &[usize],
    activation: Activation,
    scheme: InitScheme,
    seed: u64,
) -> Result<Mlp> {
    if widths.len() < 2 {
        return Err(Error::Argument(format!(
            "width chain needs at least two entries, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Argument(format!("nonpositive width in {widths:?}")));
    }
    let mut rng = stream_rng(seed, Stream::Init);
    let layers = widths
        .windows(2)
        .map(|w| init_dense(w[0], w[1], scheme, &mut rng))
        .collect();
    Mlp::new(layers, activation)
}

/// AMDL checkpoint bytes. Parameters are stored as f32.
pub fn encode_checkpoint(model: &Mlp) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(AMDL_MAGIC);
    out.extend_from_slice(&AMDL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        for &w in layer.weight.iter() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in layer.bias.iter() {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&model.activation.tag().to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != AMDL_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = r.u32("version")?;
    if version != AMDL_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::format("layer count", "checkpoint has no layers"));
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let out_dim = r.u32("out")? as usize;
        let in_dim = r.u32("in")? as usize;
        let mut weight = Vec::with_capacity((out_dim * in_dim).min(bytes.len()));
        for _ in 0..out_dim * in_dim {
            weight.push(f64::from(r.f32("weights")?));
        }
        let mut bias = Vec::with_capacity(out_dim.min(bytes.len()));
        for _ in 0..out_dim {
            bias.push(f64::from(r.f32("biases")?));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((out_dim, in_dim), weight).expect("sized"),
            bias: Array1::from(bias),
        });
    }
    let activation = Activation::from_tag(r.u32("activation")?)?;
    r.finish()?;
    Mlp::new(layers, activation).map_err(|e| Error::format("layers", e.to_string()))
}

pub fn write_checkpoint(model: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
