use std::f64::consts::PI;

use adaptlab_core::datamodel::{Dataset, Role};
use adaptlab_core::gradcheck::check_vat;
use adaptlab_core::nn::{cross_entropy, kl_divergence, softmax, Activation, Dense, Mlp};
use adaptlab_core::protocols::{run_lp, AdaptedModel, StageConfig};
use adaptlab_core::rng::seeded;
use adaptlab_core::vat::{
    lds_loss, power_iterate, vat_augmented_objective, vat_direction, VatConfig,
};
use ndarray::{array, Array1, Array2};
use rand::Rng;

fn probs_at(head: &Dense, z: &Array1<f64>) -> Vec<f64> {
    let logits = head.apply(z.view().insert_axis(ndarray::Axis(0))).unwrap();
    softmax(logits.view()).row(0).to_vec()
}

/// Direction among 3600 evenly spaced unit vectors maximizing KL at radius `eps`.
fn brute_force_direction(head: &Dense, z: &Array1<f64>, eps: f64) -> [f64; 2] {
    let clean = probs_at(head, z);
    let mut best = (f64::NEG_INFINITY, [1.0, 0.0]);
    for k in 0..3600 {
        let angle = 2.0 * PI * k as f64 / 3600.0;
        let d = [angle.cos(), angle.sin()];
        let shifted = array![z[0] + eps * d[0], z[1] + eps * d[1]];
        let kl = kl_divergence(&clean, &probs_at(head, &shifted)).unwrap();
        if kl > best.0 {
            best = (kl, d);
        }
    }
    best.1
}

fn random_head(classes: usize, rng: &mut impl Rng) -> Dense {
    Dense {
        weight: Array2::from_shape_fn((classes, 2), |_| rng.random_range(-2.0..2.0)),
        bias: Array1::from_shape_fn(classes, |_| rng.random_range(-0.5..0.5)),
    }
}

#[test]
fn power_iteration_matches_brute_force_maximizer() {
    for instance in 0..12u64 {
        let mut rng = seeded(instance);
        // Two-class heads have a rank-one KL Hessian; three-class heads need iterations.
        let classes = 2 + (instance % 2) as usize;
        let head = random_head(classes, &mut rng);
        let z = array![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let config = VatConfig {
            power_iters: if classes == 2 { 1 } else { 30 },
            ..VatConfig::default()
        };
        let dir = vat_direction(&head, z.view().insert_axis(ndarray::Axis(0)), &config, instance).unwrap();
        let oracle = brute_force_direction(&head, &z, 1e-3 * z.dot(&z).sqrt());
        let cosine = dir[[0, 0]] * oracle[0] + dir[[0, 1]] * oracle[1];
        assert!(cosine.abs() > 0.99, "instance {instance}: |cos| = {}", cosine.abs());
    }
}

#[test]
fn directions_are_unit_and_finite() {
    let mut rng = seeded(9);
    let head = random_head(4, &mut rng);
    let z = Array2::from_shape_fn((16, 2), |_| rng.random_range(-3.0..3.0));
    let d = vat_direction(&head, z.view(), &VatConfig::default(), 3).unwrap();
    for row in d.rows() {
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn constant_head_falls_back_to_random_unit_direction() {
    let head = Dense::zeros(3, 4);
    let z = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64);
    let d = vat_direction(&head, z.view(), &VatConfig::default(), 1).unwrap();
    for row in d.rows() {
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn head_width_mismatch_is_a_shape_error() {
    let head = Dense::zeros(3, 2);
    let z = Array2::zeros((2, 4));
    let err = vat_direction(&head, z.view(), &VatConfig::default(), 0).unwrap_err();
    assert!(matches!(err, adaptlab_core::Error::Shape(_)), "{err}");
}

#[test]
fn power_iteration_converges() {
    let mut rng = seeded(17);
    let head = Dense {
        weight: Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0)),
        bias: Array1::zeros(5),
    };
    let z = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
    let start = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
    let mut history = Vec::new();
    power_iterate(&head, z.view(), start, 1e-6, 40, |d| history.push(d.clone())).unwrap();
    let (prev, last) = (&history[history.len() - 2], &history[history.len() - 1]);
    for (a, b) in prev.rows().into_iter().zip(last.rows()) {
        assert!(a.dot(&b).abs() > 0.999, "consecutive cosine {}", a.dot(&b));
    }
}

#[test]
fn lds_loss_matches_two_forward_passes() {
    let mut rng = seeded(5);
    let head = random_head(3, &mut rng);
    let z = Array2::from_shape_fn((6, 2), |_| rng.random_range(-2.0..2.0));
    let dirs = vat_direction(&head, z.view(), &VatConfig::default(), 5).unwrap();
    let eps = 0.3;
    let mut expected = 0.0;
    for (zr, dr) in z.rows().into_iter().zip(dirs.rows()) {
        let shifted = &zr + &(&dr * eps);
        expected += kl_divergence(&probs_at(&head, &zr.to_owned()), &probs_at(&head, &shifted)).unwrap();
    }
    expected /= 6.0;
    let got = lds_loss(&head, z.view(), dirs.view(), eps).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert_eq!(lds_loss(&head, z.view(), dirs.view(), 0.0).unwrap(), 0.0);
    assert!(got >= 0.0);
}

#[test]
fn alpha_zero_is_plain_cross_entropy() {
    let mut rng = seeded(23);
    let head = random_head(3, &mut rng);
    let z = Array2::from_shape_fn((5, 2), |_| rng.random_range(-2.0..2.0));
    let labels = [0, 1, 2, 1, 0];
    let config = VatConfig {
        alpha: 0.0,
        ..VatConfig::default()
    };
    let (loss, grad) = vat_augmented_objective(&head, z.view(), &labels, &config, 1).unwrap();
    let probs = softmax(head.apply(z.view()).unwrap().view());
    assert_eq!(loss, cross_entropy(&probs, &labels).unwrap());
    let mut residual = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        residual[[i, y]] -= 1.0;
    }
    residual /= 5.0;
    let expected = residual.t().dot(&z);
    for (a, b) in grad.weight.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut rng = seeded(31);
    let head = Dense {
        weight: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
        bias: Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5)),
    };
    let z = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.5..1.5));
    let labels = [0, 2, 1, 1, 0];
    let config = VatConfig {
        epsilon_rel: 0.3,
        ..VatConfig::default()
    };
    let err = check_vat(&head, z.view(), &labels, &config, &mut seeded(2), 1e-5, None).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

/// Signed distance from the nearest training point to the binary decision
/// boundary; negative when some point is misclassified.
fn min_margin(model: &AdaptedModel, data: &Dataset) -> f64 {
    let w = &model.head.weight;
    let a = [w[[1, 0]] - w[[0, 0]], w[[1, 1]] - w[[0, 1]]];
    let b = model.head.bias[1] - model.head.bias[0];
    let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let x = data.features_f64();
    x.rows()
        .into_iter()
        .zip(data.labels().unwrap())
        .map(|(r, &y)| {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            sign * (a[0] * r[0] + a[1] * r[1] + b) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

fn identity_trunk() -> Mlp {
    Mlp::new(
        vec![Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        }],
        Activation::Identity,
    )
    .unwrap()
}

fn separable_set(seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let n = 60;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 0 { -1.0 } else { 1.0 };
        x[[i, 0]] = sign * rng.random_range(0.3..2.0);
        x[[i, 1]] = rng.random_range(-2.0..2.0) + sign * 0.5;
        y.push(class);
    }
    Dataset::new("separable", Role::IdTrain, None, x.mapv(|v| v as f32), Some(y), 2).unwrap()
}

/// The smoothness term widens the margin on most but not all instances, so
/// the check is over a family of seeded sets.
#[test]
fn vat_widens_the_margin_on_separable_data() {
    let plain = StageConfig::lp(100, 0.5);
    let vat = plain.clone().with_vat(VatConfig::default());
    let (mut wins, mut total_gain) = (0, 0.0);
    let sets = 30;
    for seed in 0..sets {
        let data = separable_set(seed);
        let model = AdaptedModel::new(identity_trunk(), 2, seed).unwrap();
        let base = min_margin(&run_lp(&model, &data, &plain, 8).unwrap(), &data);
        let smoothed = min_margin(&run_lp(&model, &data, &vat, 8).unwrap(), &data);
        assert!(base > 0.0 && smoothed > 0.0, "set {seed} not separated");
        wins += usize::from(smoothed > base);
        total_gain += smoothed - base;
    }
    assert!(total_gain > 0.0, "mean margin change {}", total_gain / sets as f64);
    assert!(wins * 5 >= sets as usize * 4, "vat wider on {wins}/{sets} sets");
}
