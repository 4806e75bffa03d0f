//! Central finite-difference verification of every analytic gradient.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{backward, forward, init_params, objective_grad, softmax, Activation, Dense, InitScheme, Mlp, Objective};
use crate::rng::{mix, seeded};
use crate::vat::{fixed_objective, vat_objective_with_rng, VatConfig};
use crate::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a − f| / max(|a| + |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub instances_per_case: usize,
    pub seed: u64,
    /// Added to the first analytic gradient entry of every instance; lets
    /// tests confirm the checker actually detects errors.
    pub perturb: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            instances_per_case: 3,
            seed: 2024,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub loss: &'static str,
    pub architecture: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn summary_line(&self) -> String {
        format!(
            "{:<4} {:<20} {:<24} instances={} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.loss,
            self.architecture,
            self.instances,
            self.max_rel_error
        )
    }
}

/// Loss of `model` on `x`; only the objective is evaluated.
fn mlp_loss(model: &Mlp, x: ArrayView2<f64>, objective: &Objective) -> Result<f64> {
    let out = forward(model, x)?;
    Ok(objective_grad(&out.logits, objective)?.0)
}

fn param_mut(layer: &mut Dense, flat: usize, is_weight: bool) -> &mut f64 {
    if is_weight {
        let cols = layer.weight.ncols();
        &mut layer.weight[[flat / cols, flat % cols]]
    } else {
        &mut layer.bias[flat]
    }
}

/// Max relative error of `backward` (parameters and input) against central
/// differences for one model and batch.
pub fn check_mlp(
    model: &Mlp,
    x: ArrayView2<f64>,
    objective: &Objective,
    step: f64,
    perturb: Option<f64>,
) -> Result<f64> {
    let mut analytic = backward(model, x, objective, true)?;
    if let Some(delta) = perturb {
        analytic.grads.layers[0].weight[[0, 0]] += delta;
    }
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for k in 0..probe.layers.len() {
        let n_weight = probe.layers[k].weight.len();
        for flat in 0..n_weight + probe.layers[k].bias.len() {
            let is_weight = flat < n_weight;
            let idx = if is_weight { flat } else { flat - n_weight };
            let original = *param_mut(&mut probe.layers[k], idx, is_weight);
            *param_mut(&mut probe.layers[k], idx, is_weight) = original + step;
            let plus = mlp_loss(&probe, x, objective)?;
            *param_mut(&mut probe.layers[k], idx, is_weight) = original - step;
            let minus = mlp_loss(&probe, x, objective)?;
            *param_mut(&mut probe.layers[k], idx, is_weight) = original;
            let g = &analytic.grads.layers[k];
            let a = if is_weight {
                g.weight[[idx / g.weight.ncols(), idx % g.weight.ncols()]]
            } else {
                g.bias[idx]
            };
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * step)));
        }
    }
    let input_grad = analytic.input_grad.expect("requested");
    let mut xp = x.to_owned();
    for i in 0..xp.nrows() {
        for j in 0..xp.ncols() {
            let original = xp[[i, j]];
            xp[[i, j]] = original + step;
            let plus = mlp_loss(model, xp.view(), objective)?;
            xp[[i, j]] = original - step;
            let minus = mlp_loss(model, xp.view(), objective)?;
            xp[[i, j]] = original;
            worst = worst.max(relative_error(input_grad[[i, j]], (plus - minus) / (2.0 * step)));
        }
    }
    Ok(worst)
}

/// Max relative error of the VAT head gradient, with the probe directions
/// and the clean reference held fixed as the update treats them.
pub fn check_vat(
    head: &Dense,
    z: ArrayView2<f64>,
    labels: &[usize],
    config: &VatConfig,
    rng: &mut ChaCha8Rng,
    step: f64,
    perturb: Option<f64>,
) -> Result<f64> {
    let task = Objective::CrossEntropy(labels);
    let vat = vat_objective_with_rng(head, z, &task, config, rng)?;
    let mut analytic = vat.grad.clone();
    if let Some(delta) = perturb {
        analytic.weight[[0, 0]] += delta;
    }
    let loss_at = |h: &Dense| -> Result<f64> {
        Ok(fixed_objective(
            h,
            z,
            &task,
            vat.reference.view(),
            vat.directions.view(),
            vat.epsilon_abs,
            config.alpha,
        )?
        .0)
    };
    let mut probe = head.clone();
    let mut worst: f64 = 0.0;
    for flat in 0..probe.weight.len() + probe.bias.len() {
        let is_weight = flat < probe.weight.len();
        let idx = if is_weight { flat } else { flat - probe.weight.len() };
        let original = *param_mut(&mut probe, idx, is_weight);
        *param_mut(&mut probe, idx, is_weight) = original + step;
        let plus = loss_at(&probe)?;
        *param_mut(&mut probe, idx, is_weight) = original - step;
        let minus = loss_at(&probe)?;
        *param_mut(&mut probe, idx, is_weight) = original;
        let a = if is_weight {
            analytic.weight[[idx / analytic.weight.ncols(), idx % analytic.weight.ncols()]]
        } else {
            analytic.bias[idx]
        };
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * step)));
    }
    Ok(worst)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

fn random_distributions(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    softmax(gaussian(rows, cols, rng).view())
}

struct Arch {
    widths: &'static [usize],
    activation: Activation,
}

const ARCHITECTURES: [Arch; 3] = [
    Arch {
        widths: &[4, 5, 3],
        activation: Activation::Tanh,
    },
    Arch {
        widths: &[6, 5, 4, 3],
        activation: Activation::Relu,
    },
    Arch {
        widths: &[5, 3],
        activation: Activation::Identity,
    },
];

fn arch_label(widths: &[usize], activation: Activation) -> String {
    let chain: Vec<String> = widths.iter().map(usize::to_string).collect();
    format!("{}/{activation:?}", chain.join("-")).to_lowercase()
}

/// Runs the full battery: every loss kind on every architecture, plus the
/// VAT objective on linear heads. One result per (loss, architecture) pair.
pub fn run_battery(options: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let n = 4;
    for (a, arch) in ARCHITECTURES.iter().enumerate() {
        for (l, loss) in ["cross_entropy", "soft_cross_entropy", "kl_to_reference"]
            .into_iter()
            .enumerate()
        {
            let mut worst: f64 = 0.0;
            for instance in 0..options.instances_per_case {
                let seed = mix(options.seed, (a * 100 + l * 10 + instance) as u64);
                let mut rng = seeded(seed);
                let model = init_params(arch.widths, arch.activation, InitScheme::UniformFanIn, seed)?;
                let x = gaussian(n, arch.widths[0], &mut rng);
                let classes = *arch.widths.last().expect("non-empty");
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
                let targets = random_distributions(n, classes, &mut rng);
                let objective = match l {
                    0 => Objective::CrossEntropy(&labels),
                    1 => Objective::SoftCrossEntropy(targets.view()),
                    _ => Objective::KlToReference(targets.view()),
                };
                worst = worst.max(check_mlp(&model, x.view(), &objective, options.step, options.perturb)?);
            }
            results.push(CheckResult {
                loss,
                architecture: arch_label(arch.widths, arch.activation),
                instances: options.instances_per_case,
                max_rel_error: worst,
                passed: worst < options.tolerance,
            });
        }
    }

    for (a, (h, c)) in [(4usize, 3usize), (6, 5), (2, 2)].into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for instance in 0..options.instances_per_case {
            let seed = mix(options.seed, (1000 + a * 10 + instance) as u64);
            let mut rng = seeded(seed);
            let head = Dense {
                weight: gaussian(c, h, &mut rng),
                bias: gaussian(1, c, &mut rng).row(0).to_owned(),
            };
            let z = gaussian(5, h, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..c)).collect();
            let config = VatConfig {
                epsilon_rel: 0.5,
                power_iters: 2,
                ..VatConfig::default()
            };
            worst = worst.max(check_vat(&head, z.view(), &labels, &config, &mut rng, options.step, options.perturb)?);
        }
        results.push(CheckResult {
            loss: "vat_objective",
            architecture: format!("head {h}-{c}"),
            instances: options.instances_per_case,
            max_rel_error: worst,
            passed: worst < options.tolerance,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes() {
        let results = run_battery(&GradcheckOptions::default()).unwrap();
        let total: usize = results.iter().map(|r| r.instances).sum();
        assert!(total >= 20);
        for r in &results {
            assert!(r.passed, "{}", r.summary_line());
        }
    }

    #[test]
    fn detects_a_corrupted_gradient() {
        let options = GradcheckOptions {
            perturb: Some(1e-3),
            ..GradcheckOptions::default()
        };
        let results = run_battery(&options).unwrap();
        assert!(results.iter().all(|r| !r.passed));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }
}
