use std::collections::BTreeMap;

use adaptlab_core::datamodel::{
    decode_embedding, encode_embedding, split_dataset, Corruption, Dataset, PredictionSet, Role,
};
use adaptlab_core::gradcheck::check_mlp;
use adaptlab_core::metrics::{accuracy, auroc, mean_corruption_accuracy, rms_calibration_error};
use adaptlab_core::nn::{init_params, softmax, Activation, InitScheme, Objective};
use ndarray::Array2;
use proptest::prelude::*;

fn brute_force_auroc(id: &[f64], anomaly: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in anomaly {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * anomaly.len()) as f64
}

fn labeled_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..30, 1usize..6, 1usize..5).prop_flat_map(|(n, d, c)| {
        (
            prop::collection::vec(-1e6f32..1e6, n * d),
            prop::collection::vec(0..c, n),
        )
            .prop_map(move |(x, y)| {
                Dataset::new(
                    "prop",
                    Role::IdTrain,
                    None,
                    Array2::from_shape_vec((n, d), x).unwrap(),
                    Some(y),
                    c,
                )
                .unwrap()
            })
    })
}

fn prediction_set(max_rows: usize) -> impl Strategy<Value = PredictionSet> {
    (1usize..max_rows, 2usize..5).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * c),
            prop::collection::vec(0..c, n),
        )
            .prop_map(move |(logits, y)| {
                let probs = softmax(Array2::from_shape_vec((n, c), logits).unwrap().view());
                PredictionSet::new(probs, Some(y)).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_round_trip(ds in labeled_dataset()) {
        let bytes = encode_embedding(&ds).unwrap();
        let back = decode_embedding(&bytes, "prop").unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn split_is_a_partition(ds in labeled_dataset(), fraction in 0.05f64..0.95, seed in any::<u64>()) {
        match split_dataset(&ds, fraction, seed) {
            Ok((a, b)) => {
                prop_assert_eq!(a.len() + b.len(), ds.len());
                let mut rows: Vec<Vec<u32>> = a
                    .features
                    .rows()
                    .into_iter()
                    .chain(b.features.rows())
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
                    .collect();
                let mut original: Vec<Vec<u32>> = ds
                    .features
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
                    .collect();
                rows.sort();
                original.sort();
                prop_assert_eq!(rows, original);
            }
            // Only ceil(f·n) = n leaves the second part empty, which needs n < 1/(1 − f) ≤ 20.
            Err(_) => prop_assert!(ds.len() < 20),
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        logits in prop::collection::vec(-800.0f64..800.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let x = Array2::from_shape_vec((3, 4), logits).unwrap();
        let p = softmax(x.view());
        for row in p.rows() {
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let q = softmax((&x + shift).view());
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), kind in 0usize..3, act in 0usize..3) {
        let activation = [Activation::Tanh, Activation::Relu, Activation::Identity][act];
        let model = init_params(&[3, 4, 3], activation, InitScheme::UniformFanIn, seed).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| ((seed >> (i * 3 + j)) % 17) as f64 / 8.5 - 1.0 + 0.01 * j as f64);
        let labels = vec![(seed % 3) as usize, 1, 2];
        let targets = softmax(Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.3).view());
        let objective = match kind {
            0 => Objective::CrossEntropy(&labels),
            1 => Objective::SoftCrossEntropy(targets.view()),
            _ => Objective::KlToReference(targets.view()),
        };
        let err = check_mlp(&model, x.view(), &objective, 1e-5, None).unwrap();
        // ReLU kinks can sit inside the difference stencil; allow a looser bound there.
        let bound = if activation == Activation::Relu { 1e-2 } else { 1e-4 };
        prop_assert!(err < bound, "relative error {err}");
    }

    #[test]
    fn auroc_matches_pair_counting(
        id in prop::collection::vec(0u8..20, 1..50),
        anomaly in prop::collection::vec(0u8..20, 1..50),
    ) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let anomaly: Vec<f64> = anomaly.into_iter().map(f64::from).collect();
        let got = auroc(&id, &anomaly).unwrap();
        prop_assert!((got - brute_force_auroc(&id, &anomaly)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_invariant_under_monotone_transform(
        id in prop::collection::vec(-3.0f64..3.0, 1..40),
        anomaly in prop::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        let f = |v: &f64| (2.0 * v).exp() + v.powi(3);
        let a = auroc(&id, &anomaly).unwrap();
        let b = auroc(&id.iter().map(f).collect::<Vec<_>>(), &anomaly.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auroc_is_antisymmetric_without_ties(values in prop::collection::btree_set(-1000i32..1000, 2..60), cut in 1usize..59) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let cut = cut.min(values.len() - 1);
        // Interleave so both sides span the range.
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, v) in values.iter().enumerate() {
            if (i * 7919) % values.len() < cut { a.push(*v) } else { b.push(*v) }
        }
        prop_assume!(!a.is_empty() && !b.is_empty());
        let sum = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_error_is_bounded(preds in prediction_set(80), bins in 1usize..20) {
        let e = rms_calibration_error(&preds, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn metrics_are_pure(preds in prediction_set(40)) {
        prop_assert_eq!(accuracy(&preds).unwrap(), accuracy(&preds).unwrap());
        prop_assert_eq!(rms_calibration_error(&preds, 15).unwrap(), rms_calibration_error(&preds, 15).unwrap());
    }

    #[test]
    fn mca_is_mean_of_cells(accs in prop::collection::vec(0usize..=10, 1..12)) {
        let mut cells = BTreeMap::new();
        for (i, &k) in accs.iter().enumerate() {
            let probs = Array2::from_shape_fn((10, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
            let labels = (0..10).map(|r| usize::from(r >= k)).collect();
            let family = ["a", "b", "c"][i % 3].to_string();
            cells.insert(
                Corruption { family, severity: (i / 3 + 1) as u8 },
                PredictionSet::new(probs, Some(labels)).unwrap(),
            );
        }
        let expected = accs.iter().map(|&k| k as f64 / 10.0).sum::<f64>() / accs.len() as f64;
        let got = mean_corruption_accuracy(&cells).unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
        let max = accs.iter().max().copied().unwrap() as f64 / 10.0;
        prop_assert!(got <= max + 1e-12);
    }
}

/// Bins whose accuracy equals their mean confidence give zero error.
#[test]
fn perfectly_calibrated_bins() {
    // Four bins of ten rows; bin b has confidence c_b and exactly 10·c_b correct rows.
    let confidences = [0.6, 0.7, 0.8, 0.9];
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for &c in &confidences {
        let correct = (c * 10.0_f64).round() as usize;
        for r in 0..10 {
            probs.extend_from_slice(&[c, 1.0 - c]);
            labels.push(usize::from(r >= correct));
        }
    }
    let preds = PredictionSet::new(Array2::from_shape_vec((40, 2), probs).unwrap(), Some(labels)).unwrap();
    assert!(rms_calibration_error(&preds, 4).unwrap() < 1e-10);
}
