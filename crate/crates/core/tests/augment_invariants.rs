use adaptlab_core::augment::{
    apply_policy, cutmix_mask, cutout_mask, gaussian_noise, mixup, AugmentCounter, AugmentKind,
    AugmentPolicy, AugmentedBatch,
};
use ndarray::Array2;
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (2usize..12, 2usize..10).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-10.0f64..10.0, n * d),
            prop::collection::vec(0usize..4, n),
        )
            .prop_map(move |(x, y)| (Array2::from_shape_vec((n, d), x).unwrap(), y))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixup_stays_in_the_segment((x, y) in batch(), seed in any::<u64>()) {
        let out = mixup(x.view(), &y, 4, 1.0, seed).unwrap();
        prop_assert_eq!(out.features.dim(), x.dim());
        prop_assert!(out.targets_valid());
        prop_assert!(out.used_soft_labels);
        for (i, row) in out.features.rows().into_iter().enumerate() {
            // Some partner j must bracket every coordinate between x_i and x_j.
            let bracketed = (0..x.nrows()).any(|j| {
                row.iter().enumerate().all(|(c, v)| {
                    let (a, b) = (x[[i, c]], x[[j, c]]);
                    *v >= a.min(b) - 1e-12 && *v <= a.max(b) + 1e-12
                })
            });
            prop_assert!(bracketed);
        }
    }

    #[test]
    fn cutmix_coordinates_come_from_a_source((x, y) in batch(), seed in any::<u64>()) {
        let out = cutmix_mask(x.view(), &y, 4, 1.0, seed).unwrap();
        prop_assert_eq!(out.features.dim(), x.dim());
        prop_assert!(out.targets_valid());
        for (i, row) in out.features.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let own = x[[i, j]] == *v;
                let other = x.column(j).iter().any(|s| s == v);
                prop_assert!(own || other);
            }
        }
    }

    #[test]
    fn noise_and_cutout_keep_shape_and_hard_targets((x, y) in batch(), seed in any::<u64>()) {
        for out in [
            gaussian_noise(x.view(), &y, 4, 0.1, seed).unwrap(),
            cutout_mask(x.view(), &y, 4, 0.3, seed).unwrap(),
        ] {
            prop_assert_eq!(out.features.dim(), x.dim());
            prop_assert!(out.targets_valid());
            prop_assert!(!out.used_soft_labels);
        }
    }

    #[test]
    fn cutout_zeroes_exactly_floor_fraction((x, y) in batch(), seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let x = x.mapv(|v| if v == 0.0 { 1.0 } else { v });
        let out = cutout_mask(x.view(), &y, 4, fraction, seed).unwrap();
        let expected = (fraction * x.ncols() as f64).floor() as usize;
        for (row_out, row_in) in out.features.rows().into_iter().zip(x.rows()) {
            let zeros = row_out.iter().filter(|v| **v == 0.0).count();
            prop_assert_eq!(zeros, expected);
            for (a, b) in row_out.iter().zip(row_in) {
                prop_assert!(*a == 0.0 || a == b);
            }
        }
    }

    #[test]
    fn zero_probability_never_fires((x, y) in batch(), seed in any::<u64>(), kind in 0usize..4) {
        let kind = [AugmentKind::Mixup, AugmentKind::CutmixMask, AugmentKind::GaussianNoise, AugmentKind::CutoutMask][kind];
        let policy = AugmentPolicy::new(kind).with_probability(0.0);
        let mut counter = AugmentCounter::default();
        let input = AugmentedBatch::from_labels(x.clone(), &y, 4).unwrap();
        for k in 0..5 {
            let out = apply_policy(&policy, input.clone(), seed.wrapping_add(k), &mut counter).unwrap();
            prop_assert_eq!(&out, &input);
        }
        prop_assert_eq!(counter.total(), 0);
    }
}

#[test]
fn unknown_kind_is_a_config_error() {
    let err = "autoaugment".parse::<AugmentKind>().unwrap_err();
    assert!(matches!(err, adaptlab_core::Error::Config(_)), "{err}");
}

#[test]
fn none_policy_is_identity() {
    let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
    let input = AugmentedBatch::from_labels(x, &[0, 1, 2], 3).unwrap();
    let mut counter = AugmentCounter::default();
    let out = apply_policy(&AugmentPolicy::new(AugmentKind::None), input.clone(), 1, &mut counter).unwrap();
    assert_eq!(out, input);
}

#[test]
fn mixup_always_sets_soft_flag_at_probability_one() {
    let x = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f64);
    let input = AugmentedBatch::from_labels(x, &[0, 1, 2, 0, 1, 2], 3).unwrap();
    let mut counter = AugmentCounter::default();
    for seed in 0..20 {
        let out = apply_policy(&AugmentPolicy::new(AugmentKind::Mixup), input.clone(), seed, &mut counter).unwrap();
        assert!(out.used_soft_labels);
    }
    assert_eq!(counter.get(AugmentKind::Mixup), 20);
}
