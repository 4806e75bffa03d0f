//! Virtual adversarial training on the penultimate representation.
//!
//! For a batch of trunk outputs `z` and a linear softmax head, the adversarial
//! direction of each row is found by power iteration on the local KL
//! curvature: start from a random unit vector `d`, probe at `r = ξ‖z‖·d`,
//! and replace `d` by the normalized gradient `∇_r KL(p(z) ‖ p(z + r))`. For a
//! linear head that gradient is `Wᵀ(p(z + r) − p(z))`.
//!
//! The smoothness loss is `KL(p(z) ‖ p(z + ε·d))` with the clean branch held
//! fixed, so gradients reach the head only through the perturbed branch.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::nn::{kl_divergence, objective_grad, softmax, Dense, DenseGrad, Objective};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Below this gradient norm a row keeps its random probe direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VatConfig {
    /// Perturbation radius relative to the batch-mean penultimate norm.
    #[serde(default = "defaults::epsilon_rel")]
    pub epsilon_rel: f64,
    /// Probe scale relative to each row's norm.
    #[serde(default = "defaults::xi")]
    pub xi: f64,
    #[serde(default = "defaults::power_iters")]
    pub power_iters: usize,
    /// Weight of the smoothness term.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
}

mod defaults {
    pub fn epsilon_rel() -> f64 {
        0.05
    }
    pub fn xi() -> f64 {
        1e-6
    }
    pub fn power_iters() -> usize {
        1
    }
    pub fn alpha() -> f64 {
        1.0
    }
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon_rel: defaults::epsilon_rel(),
            xi: defaults::xi(),
            power_iters: defaults::power_iters(),
            alpha: defaults::alpha(),
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel > 0.0 && self.epsilon_rel.is_finite()) {
            return Err(Error::Config(format!("epsilon_rel must be positive, got {}", self.epsilon_rel)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_head(head: &Dense, z: &ArrayView2<f64>) -> Result<()> {
    if z.ncols() != head.in_dim() {
        return Err(Error::Shape(format!(
            "head expects h = {}, penultimate batch has {}",
            head.in_dim(),
            z.ncols()
        )));
    }
    Ok(())
}

fn row_norms(m: &ArrayView2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|r| linalg::norm(r.iter().copied())).collect()
}

/// Mean row norm of `z`; the reference length for `epsilon_rel`.
pub fn mean_norm(z: ArrayView2<f64>) -> f64 {
    if z.nrows() == 0 {
        return 0.0;
    }
    row_norms(&z).iter().sum::<f64>() / z.nrows() as f64
}

fn random_unit_rows<R: Rng>(n: usize, h: usize, rng: &mut R) -> Array2<f64> {
    let mut d = Array2::from_shape_simple_fn((n, h), || StandardNormal.sample(&mut *rng));
    for mut row in d.rows_mut() {
        let norm = linalg::norm(row.iter().copied());
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    d
}

/// Power iteration from `start`, calling `visit` with the directions after
/// every iteration.
pub fn power_iterate(
    head: &Dense,
    z: ArrayView2<f64>,
    start: Array2<f64>,
    xi: f64,
    iters: usize,
    mut visit: impl FnMut(&Array2<f64>),
) -> Result<Array2<f64>> {
    check_head(head, &z)?;
    if start.dim() != z.dim() {
        return Err(Error::Shape("start directions must match z".into()));
    }
    let clean = softmax(linalg::affine(z, head.weight.view(), &head.bias).view());
    let probe: Vec<f64> = row_norms(&z).into_iter().map(|n| xi * n).collect();
    let mut d = start;
    for _ in 0..iters {
        let mut shifted = z.to_owned();
        for (i, (mut row, dir)) in shifted.rows_mut().into_iter().zip(d.rows()).enumerate() {
            row.scaled_add(probe[i], &dir);
        }
        let perturbed = softmax(linalg::affine(shifted.view(), head.weight.view(), &head.bias).view());
        let diff = perturbed - &clean;
        let grad = linalg::dot(diff.view(), head.weight.view());
        for (mut dir, g) in d.rows_mut().into_iter().zip(grad.rows()) {
            let norm = linalg::norm(g.iter().copied());
            if norm >= DEGENERATE_NORM && norm.is_finite() {
                Zip::from(&mut dir).and(&g).for_each(|a, &b| *a = b / norm);
            }
        }
        visit(&d);
    }
    Ok(d)
}

pub fn vat_direction_with_rng<R: Rng>(
    head: &Dense,
    z: ArrayView2<f64>,
    config: &VatConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    config.validate()?;
    check_head(head, &z)?;
    let start = random_unit_rows(z.nrows(), z.ncols(), rng);
    power_iterate(head, z, start, config.xi, config.power_iters, |_| {})
}

/// Unit-norm adversarial direction per row of `z`.
pub fn vat_direction(
    head: &Dense,
    z: ArrayView2<f64>,
    config: &VatConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    vat_direction_with_rng(head, z, config, &mut stream_rng(seed, Stream::Vat))
}

fn perturb(z: ArrayView2<f64>, directions: ArrayView2<f64>, epsilon_abs: f64) -> Result<Array2<f64>> {
    if directions.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "directions {:?} vs penultimate {:?}",
            directions.dim(),
            z.dim()
        )));
    }
    let mut out = z.to_owned();
    out.scaled_add(epsilon_abs, &directions);
    Ok(out)
}

/// Mean `KL(p(z) ‖ p(z + ε·d))`.
pub fn lds_loss(
    head: &Dense,
    z: ArrayView2<f64>,
    directions: ArrayView2<f64>,
    epsilon_abs: f64,
) -> Result<f64> {
    check_head(head, &z)?;
    let shifted = perturb(z, directions, epsilon_abs)?;
    let clean = softmax(linalg::affine(z, head.weight.view(), &head.bias).view());
    let pert = softmax(linalg::affine(shifted.view(), head.weight.view(), &head.bias).view());
    let mut total = 0.0;
    for (p, q) in clean.rows().into_iter().zip(pert.rows()) {
        total += kl_divergence(p.as_slice().expect("contiguous"), q.as_slice().expect("contiguous"))?;
    }
    Ok(total / z.nrows().max(1) as f64)
}

fn head_grad(d_logits: &Array2<f64>, inputs: ArrayView2<f64>) -> DenseGrad {
    DenseGrad {
        weight: linalg::t_dot(d_logits.view(), inputs),
        bias: linalg::col_sum(d_logits.view()),
    }
}

/// `task(head) + alpha · KL(reference ‖ p(z + ε·d))` with `reference` and
/// `directions` held constant. This is the function whose gradient the VAT
/// update follows.
pub fn fixed_objective(
    head: &Dense,
    z: ArrayView2<f64>,
    task: &Objective,
    reference: ArrayView2<f64>,
    directions: ArrayView2<f64>,
    epsilon_abs: f64,
    alpha: f64,
) -> Result<(f64, DenseGrad)> {
    check_head(head, &z)?;
    let logits = linalg::affine(z, head.weight.view(), &head.bias);
    let (task_loss, d_task) = objective_grad(&logits, task)?;
    let mut grad = head_grad(&d_task, z);
    if alpha == 0.0 {
        return Ok((task_loss, grad));
    }
    let shifted = perturb(z, directions, epsilon_abs)?;
    let pert_logits = linalg::affine(shifted.view(), head.weight.view(), &head.bias);
    let (lds, d_lds) = objective_grad(&pert_logits, &Objective::KlToReference(reference))?;
    grad.add_scaled(&head_grad(&d_lds, shifted.view()), alpha);
    Ok((task_loss + alpha * lds, grad))
}

/// Loss, head gradient and bookkeeping of one VAT evaluation.
#[derive(Clone, Debug)]
pub struct VatStep {
    pub loss: f64,
    pub grad: DenseGrad,
    pub directions: Array2<f64>,
    pub reference: Array2<f64>,
    pub epsilon_abs: f64,
}

pub fn vat_objective_with_rng<R: Rng>(
    head: &Dense,
    z: ArrayView2<f64>,
    task: &Objective,
    config: &VatConfig,
    rng: &mut R,
) -> Result<VatStep> {
    config.validate()?;
    check_head(head, &z)?;
    let epsilon_abs = config.epsilon_rel * mean_norm(z);
    let reference = softmax(linalg::affine(z, head.weight.view(), &head.bias).view());
    let directions = if config.alpha == 0.0 {
        Array2::zeros(z.raw_dim())
    } else {
        vat_direction_with_rng(head, z, config, rng)?
    };
    let (loss, grad) = fixed_objective(
        head,
        z,
        task,
        reference.view(),
        directions.view(),
        epsilon_abs,
        config.alpha,
    )?;
    Ok(VatStep {
        loss,
        grad,
        directions,
        reference,
        epsilon_abs,
    })
}

/// Cross-entropy plus `alpha` times the smoothness loss; gradient on the head only.
pub fn vat_augmented_objective(
    head: &Dense,
    z: ArrayView2<f64>,
    labels: &[usize],
    config: &VatConfig,
    seed: u64,
) -> Result<(f64, DenseGrad)> {
    let step = vat_objective_with_rng(
        head,
        z,
        &Objective::CrossEntropy(labels),
        config,
        &mut stream_rng(seed, Stream::Vat),
    )?;
    Ok((step.loss, step.grad))
}
