//! Loss-level identities checked against plain floating-point re-derivations.

use poe_core::autodiff::{Tape, Tensor};
use poe_core::data::{generate, DatasetSpec, SampleRecord};
use poe_core::gaussian::vib_kl;
use poe_core::heads::{make_rank_labels, HeadKind, HeadParams};
use poe_core::model::{head_loss, sampled_head_loss, HeadTargets, Mode, PoeModel, TrainConfig};
use poe_core::ordinal::{mine_triplets, ordinal_loss_value, OrdinalConfig};
use poe_core::rng::{stream, Stream};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// Per-row head loss written out directly from the head definitions.
fn plain_row_loss(
    kind: HeadKind,
    w: &Tensor,
    z: &[f64],
    record: &SampleRecord,
    classes: usize,
) -> f64 {
    let out: Vec<f64> = (0..w.cols())
        .map(|c| (0..w.rows()).map(|r| z[r] * w.get(r, c)).sum())
        .collect();
    match kind {
        HeadKind::Direct => (record.target - out[0]).powi(2),
        HeadKind::Classification => -log_softmax_at(&out, record.class_index - 1),
        HeadKind::Ranking => {
            let labels = make_rank_labels(record.class_index, classes).unwrap();
            labels
                .bits()
                .iter()
                .enumerate()
                .map(|(k, &b)| -log_softmax_at(&out[2 * k..2 * k + 2], usize::from(b)))
                .sum()
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn records(n: usize, classes: usize, seed: u64) -> Vec<SampleRecord> {
    generate(&DatasetSpec {
        n_samples: n,
        features: 5,
        classes,
        noise_mixture: vec![(0.2, 0.5), (0.8, 0.5)],
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
    .records
}

#[test]
fn zero_sigma_single_sample_reduces_to_deterministic_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let kind = [
            HeadKind::Direct,
            HeadKind::Classification,
            HeadKind::Ranking,
        ][instance % 3];
        let classes = 2 + instance % 6;
        let (b, d) = (1 + instance % 9, 1 + instance % 7);
        let batch = records(b, classes, instance as u64);
        let head = HeadParams::new(
            kind,
            classes,
            random_tensor(&mut rng, d, kind.output_width(classes), 1.0),
        )
        .unwrap();
        let mu = random_tensor(&mut rng, b, d, 2.0);
        let eps = random_tensor(&mut rng, b, d, 1.0);
        let targets = HeadTargets::from_records(kind, classes, &batch).unwrap();

        let mut tape = Tape::new();
        let bound = head.bind(&mut tape, true);
        let mu_v = tape.param(mu.clone());
        let sigma_v = tape.constant(Tensor::zeros(b, d));
        let prob = sampled_head_loss(&mut tape, &bound, mu_v, sigma_v, &eps, &targets).unwrap();
        let det = head_loss(&mut tape, &bound, mu_v, &targets).unwrap();
        let (p, q) = (tape.value(prob).item(), tape.value(det).item());

        let oracle = batch
            .iter()
            .enumerate()
            .map(|(i, r)| plain_row_loss(kind, &head.weights, mu.row_slice(i), r, classes))
            .sum::<f64>()
            / b as f64;
        worst = worst.max((p - q).abs()).max((q - oracle).abs());
    }
    assert!(worst <= 1e-12, "largest discrepancy {worst:e}");
}

#[test]
fn baseline_mode_is_the_head_loss_of_the_mean() {
    let batch = records(7, 4, 3);
    for kind in [
        HeadKind::Direct,
        HeadKind::Classification,
        HeadKind::Ranking,
    ] {
        let cfg = TrainConfig {
            head: kind,
            mode: Mode::DeterministicBaseline,
            classes: 4,
            embed_dim: 5,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let model = PoeModel::new(5, cfg).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let total = model.total_loss(&mut tape, &p, &batch, None).unwrap();
        let v = total.values(&tape);
        assert_eq!(v.total, v.head);
        let mu = model
            .forward_batch(&poe_core::data::features_tensor(&batch), true)
            .unwrap();
        let oracle = batch
            .iter()
            .zip(&mu)
            .map(|(r, g)| plain_row_loss(kind, &model.head.weights, g.mu(), r, 4))
            .sum::<f64>()
            / batch.len() as f64;
        assert!(
            (v.total - oracle).abs() < 1e-12,
            "{kind}: {} vs {oracle}",
            v.total
        );
    }
}

#[test]
fn total_loss_is_the_weighted_sum_of_independent_terms() {
    let batch = records(3, 5, 8);
    for kind in [
        HeadKind::Direct,
        HeadKind::Classification,
        HeadKind::Ranking,
    ] {
        let cfg = TrainConfig {
            head: kind,
            alpha: 1e-4,
            beta: 1e-5,
            samples: 4,
            embed_dim: 6,
            hidden: vec![10],
            ..TrainConfig::default()
        };
        let model = PoeModel::new(5, cfg.clone()).unwrap();
        let eps = model
            .draw_noise(batch.len(), &mut stream(2, Stream::Sampling))
            .unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let total = model.total_loss(&mut tape, &p, &batch, Some(&eps)).unwrap();
        let got = tape.value(total.total).item();

        let gs = model
            .forward_batch(&poe_core::data::features_tensor(&batch), true)
            .unwrap();
        let b = batch.len();
        let mut head = 0.0;
        for row in 0..eps.rows() {
            let i = row % b;
            let z: Vec<f64> = (0..6)
                .map(|j| gs[i].mu()[j] + gs[i].sigma()[j] * eps.get(row, j))
                .collect();
            head += plain_row_loss(kind, &model.head.weights, &z, &batch[i], 5);
        }
        head /= eps.rows() as f64;
        let labels: Vec<f64> = batch.iter().map(|r| r.target).collect();
        let ord = ordinal_loss_value(
            &gs,
            &mine_triplets(&labels).unwrap(),
            &OrdinalConfig::new(cfg.metric, cfg.margin).unwrap(),
        )
        .unwrap();
        let vib = gs.iter().map(vib_kl).sum::<f64>() / b as f64;
        let expected = head + 1e-4 * ord + 1e-5 * vib;
        assert!(
            (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "{kind}: {got} vs {expected}"
        );
    }
}
