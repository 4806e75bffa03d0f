use adaptlab_core::datamodel::Dataset;
use adaptlab_core::metrics::accuracy;
use adaptlab_core::nn::encode_checkpoint;
use adaptlab_core::protocols::{run_lp, AdaptedModel, StageConfig};
use adaptlab_core::synth::{
    corrupt, gauss_sigma, generate_task, pretrain_for, CorruptionFamily, SynthSpec, SynthTask,
    SynthTruth,
};
use ndarray::Array2;

/// Linear discriminant scores with the exact shared covariance
/// `σl²·PPᵀ + σa²·I`, whose inverse is `(I − PPᵀ)/σa² + PPᵀ/(σl² + σa²)`.
fn bayes_accuracy(truth: &SynthTruth, data: &Dataset) -> f64 {
    let p = &truth.basis_id;
    let d = p.nrows();
    let (sl2, sa2) = (truth.latent_noise.powi(2), truth.ambient_noise.powi(2));
    let ppt = p.dot(&p.t());
    let precision = (Array2::<f64>::eye(d) - &ppt) / sa2 + &ppt / (sl2 + sa2);
    let means = truth.class_means(false);
    let weights = means.dot(&precision);
    let offsets: Vec<f64> = weights
        .rows()
        .into_iter()
        .zip(means.rows())
        .map(|(w, m)| -0.5 * w.dot(&m))
        .collect();
    let scores = data.features_f64().dot(&weights.t());
    let labels = data.labels().unwrap();
    let correct = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = (0..row.len())
                .max_by(|&a, &b| (row[a] + offsets[a]).total_cmp(&(row[b] + offsets[b])))
                .unwrap();
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn large_spec(shift: f64) -> SynthSpec {
    SynthSpec {
        n_test: 10_000,
        n_source: 200,
        n_train: 100,
        shift_strength: shift,
        ..SynthSpec::default()
    }
}

#[test]
fn bayes_oracle_is_accurate_on_default_spec() {
    let task = generate_task(&SynthSpec::default()).unwrap();
    let acc = bayes_accuracy(&task.truth, &task.suite.id_test);
    assert!(acc > 0.95, "Bayes ID accuracy {acc}");
}

#[test]
fn zero_shift_makes_id_and_ood_exchangeable() {
    let task = generate_task(&large_spec(0.0)).unwrap();
    let id = bayes_accuracy(&task.truth, &task.suite.id_test);
    let ood = bayes_accuracy(&task.truth, &task.suite.ood_test);
    assert!((id - ood).abs() < 0.02, "id {id} ood {ood}");
}

#[test]
fn shift_lowers_ood_accuracy_of_the_id_oracle() {
    let task = generate_task(&large_spec(1.5)).unwrap();
    let id = bayes_accuracy(&task.truth, &task.suite.id_test);
    let ood = bayes_accuracy(&task.truth, &task.suite.ood_test);
    assert!(ood < id, "id {id} ood {ood}");
}

fn mean_perturbation(a: &Dataset, b: &Dataset) -> f64 {
    let diff = a.features_f64() - b.features_f64();
    diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / a.len() as f64
}

#[test]
fn corruption_grows_with_severity() {
    let task = generate_task(&SynthSpec {
        n_test: 500,
        ..large_spec(1.0)
    })
    .unwrap();
    let clean = &task.suite.id_test;
    for family in CorruptionFamily::ALL {
        let norms: Vec<f64> = (0..=5)
            .map(|s| mean_perturbation(&corrupt(clean, family, s, 4).unwrap(), clean))
            .collect();
        assert_eq!(norms[0], 0.0, "{family:?}");
        for w in norms.windows(2) {
            assert!(w[1] > w[0], "{family:?}: {norms:?}");
        }
    }
}

#[test]
fn gauss_noise_has_the_documented_scale() {
    let task = generate_task(&large_spec(1.0)).unwrap();
    let clean = &task.suite.id_test;
    let x = clean.features_f64();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    for severity in [1, 3, 5] {
        let noisy = corrupt(clean, CorruptionFamily::Gauss, severity, 9).unwrap();
        let diff = noisy.features_f64() - &x;
        let std = (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt();
        let sigma = gauss_sigma(rms, severity);
        assert!((std / sigma - 1.0).abs() < 0.05, "severity {severity}: {std} vs {sigma}");
    }
}

#[test]
fn corrupted_sets_are_tagged() {
    let task = generate_task(&SynthSpec {
        n_test: 50,
        ..large_spec(1.0)
    })
    .unwrap();
    for set in &task.suite.corrupted {
        let tag = set.corruption.as_ref().expect("tagged");
        assert!((1..=5).contains(&tag.severity));
        assert_eq!(set.name, format!("{}-{}", tag.family, tag.severity));
    }
}

fn all_sets(task: &SynthTask) -> Vec<&Dataset> {
    let mut sets = vec![&task.source, &task.id_train];
    sets.extend(task.suite.members());
    sets
}

#[test]
fn generation_is_bitwise_deterministic() {
    let spec = SynthSpec {
        n_test: 100,
        ..large_spec(1.0)
    };
    let a = generate_task(&spec).unwrap();
    let b = generate_task(&spec).unwrap();
    let (sa, sb) = (all_sets(&a), all_sets(&b));
    assert_eq!(sa.len(), spec.dataset_count());
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x, y);
        assert_eq!(x.dim(), spec.input_dim);
        x.validate().unwrap();
    }
    let other = generate_task(&SynthSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.id_train, a.id_train);
}

#[test]
fn pretrained_trunk_beats_chance_and_is_reproducible() {
    let spec = SynthSpec::default();
    let task = generate_task(&spec).unwrap();
    let trunk = pretrain_for(&spec, &task).unwrap();
    assert_eq!(trunk.output_dim(), *spec.trunk_widths.last().unwrap());
    assert_eq!(
        encode_checkpoint(&trunk).unwrap(),
        encode_checkpoint(&pretrain_for(&spec, &task).unwrap()).unwrap()
    );

    let model = AdaptedModel::new(trunk, spec.source_classes, 1).unwrap();
    let probed = run_lp(&model, &task.source, &StageConfig::lp(30, 0.03), 2).unwrap();
    let acc = accuracy(&probed.predict(&task.source).unwrap()).unwrap();
    let chance = 1.0 / spec.source_classes as f64;
    assert!(acc >= chance + 0.2, "source accuracy {acc}");
}
