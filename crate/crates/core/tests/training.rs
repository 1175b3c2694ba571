use poe_core::data::{generate, Dataset, DatasetSpec, SampleRecord};
use poe_core::eval::accuracy;
use poe_core::heads::HeadKind;
use poe_core::model::{train, Mode, PoeModel, TrainConfig};
use poe_core::Error;

/// Pre-normalisation sigma activations computed with plain loops.
fn sigma_activations(model: &PoeModel, records: &[SampleRecord]) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let mut h = r.features.clone();
            for layer in &model.hidden {
                h = (0..layer.weight.cols())
                    .map(|c| {
                        let s: f64 = (0..h.len()).map(|k| h[k] * layer.weight.get(k, c)).sum();
                        (s + layer.bias.get(0, c)).max(0.0)
                    })
                    .collect();
            }
            let w = &model.sigma_head;
            (0..w.weight.cols())
                .map(|c| {
                    (0..h.len()).map(|k| h[k] * w.weight.get(k, c)).sum::<f64>() + w.bias.get(0, c)
                })
                .collect()
        })
        .collect()
}

fn spec(n: usize, mixture: Vec<(f64, f64)>, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_samples: n,
        noise_mixture: mixture,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn running_statistics_converge_geometrically_to_fixed_batch_statistics() {
    let data = generate(&spec(8, vec![(0.3, 1.0)], 1)).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 30,
        learning_rate: 0.0,
        embed_dim: 4,
        hidden: vec![6],
        holdout_fraction: 0.0,
        ..TrainConfig::default()
    };
    let init = PoeModel::new(data.feature_dim(), cfg.clone()).unwrap();
    let acts = sigma_activations(&init, &data.records);
    let n = acts.len() as f64;
    for k in [1usize, 5, 30] {
        let mut model = init.clone();
        model.config.epochs = k;
        train(&mut model, &data).unwrap();
        let decay = 0.9f64.powi(k as i32);
        for j in 0..4 {
            let mean = acts.iter().map(|a| a[j]).sum::<f64>() / n;
            let var = acts.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let rm = model.bn.running_mean.get(0, j);
            let rv = model.bn.running_var.get(0, j);
            assert!(
                (rm - mean * (1.0 - decay)).abs() < 1e-10,
                "k={k}: {rm} vs {mean}"
            );
            assert!(
                (rv - (decay + var * (1.0 - decay))).abs() < 1e-10,
                "k={k}: {rv} vs {var}"
            );
        }
    }
}

#[test]
fn clean_data_is_learnable_by_the_baseline() {
    let data = generate(&spec(2000, vec![(0.0, 1.0)], 0)).unwrap();
    let (train_set, test) = data.split_holdout(0.25).unwrap();
    let cfg = TrainConfig {
        mode: Mode::DeterministicBaseline,
        learning_rate: 1e-3,
        epochs: 60,
        ..TrainConfig::default()
    };
    let mut model = PoeModel::new(train_set.feature_dim(), cfg).unwrap();
    train(&mut model, &train_set).unwrap();
    let preds = model.predict(&test.records).unwrap();
    let classes: Vec<usize> = preds.iter().map(|p| p.decoded.class).collect();
    let acc = accuracy(&classes, &test.classes()).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        embed_dim: 6,
        hidden: vec![16],
        samples: 5,
        batch_size: 16,
        epochs: 3,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let data = generate(&spec(200, vec![(0.1, 0.5), (1.0, 0.5)], 2)).unwrap();
    for mode in Mode::ALL {
        let run = || {
            let mut m = PoeModel::new(data.feature_dim(), small_config(mode)).unwrap();
            let report = train(&mut m, &data).unwrap();
            (m.to_bytes(), report)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b, "{mode}");
        assert_eq!(ra, rb, "{mode}");
    }
}

#[test]
fn zero_epochs_leave_the_initialisation_untouched() {
    let data = generate(&spec(50, vec![(0.5, 1.0)], 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config(Mode::FullPoe)
    };
    let init = PoeModel::new(data.feature_dim(), cfg).unwrap();
    let mut model = init.clone();
    let report = train(&mut model, &data).unwrap();
    assert_eq!(report.total_steps, 0);
    assert!(report.epochs.is_empty());
    assert_eq!(model.to_bytes(), init.to_bytes());
}

fn separable_toy() -> Dataset {
    let records = (0..40)
        .map(|i| {
            let side = if i % 2 == 0 { -1.0 } else { 1.0 };
            let jitter = (i as f64 * 0.37).sin() * 0.2;
            SampleRecord {
                features: vec![side + jitter, 0.5 * jitter, -side],
                target: if side < 0.0 { 2.5 } else { 7.5 },
                class_index: if side < 0.0 { 1 } else { 2 },
                noise_level: 0.0,
            }
        })
        .collect();
    Dataset::new(records)
}

#[test]
fn classification_loss_decreases_on_a_separable_toy_set() {
    let cfg = TrainConfig {
        head: HeadKind::Classification,
        classes: 2,
        batch_size: 40,
        epochs: 5,
        ..small_config(Mode::DeterministicBaseline)
    };
    let mut model = PoeModel::new(3, cfg).unwrap();
    let report = train(&mut model, &separable_toy()).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss.total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn divergence_is_reported_with_its_step() {
    let data = generate(&spec(64, vec![(1.0, 1.0)], 4)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e12,
        epochs: 20,
        ..small_config(Mode::FullPoe)
    };
    let mut model = PoeModel::new(data.feature_dim(), cfg).unwrap();
    match train(&mut model, &data) {
        Err(Error::Divergence { step, epoch, .. }) => assert!(step >= epoch),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn feature_width_mismatch_is_rejected() {
    let data = generate(&spec(20, vec![(0.0, 1.0)], 5)).unwrap();
    let mut model = PoeModel::new(data.feature_dim() + 1, small_config(Mode::PEmb)).unwrap();
    assert!(matches!(train(&mut model, &data), Err(Error::Dimension(_))));
}
