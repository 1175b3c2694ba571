use poe_core::data::{corrupt, generate, Dataset, DatasetSpec, SampleRecord};
use poe_core::eval::{uncertainty_analysis, AnalysisOptions, UncertaintyModel};
use poe_core::gaussian::{uncertainty_score, DiagonalGaussian};
use poe_core::heads::Decoded;
use poe_core::model::Prediction;
use poe_core::ordinal::Metric;
use poe_core::rng::{substream, Stream};
use poe_core::{Error, Result};

/// Reads the injected noise straight off each record: sigma grows with it
/// and the estimate is off by exactly that much.
struct NoiseOracle {
    sigma_of: fn(f64) -> f64,
}

impl UncertaintyModel for NoiseOracle {
    fn predict(&self, records: &[SampleRecord]) -> Result<Vec<Prediction>> {
        records
            .iter()
            .map(|r| {
                let s = (self.sigma_of)(r.noise_level);
                Ok(Prediction {
                    gaussian: DiagonalGaussian::new(vec![r.target, 0.0], vec![s, 2.0 * s])?,
                    decoded: Decoded {
                        class: r.class_index,
                        estimate: r.target + r.noise_level,
                    },
                })
            })
            .collect()
    }

    fn metric(&self) -> Metric {
        Metric::Skl
    }
}

fn clean(n: usize) -> Dataset {
    generate(&DatasetSpec {
        n_samples: n,
        noise_mixture: vec![(0.0, 1.0)],
        seed: 12,
        ..DatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn uncertainty_tracking_injected_noise_rises_with_corruption() {
    let model = NoiseOracle {
        sigma_of: |eta| 0.1 + eta,
    };
    let opts = AnalysisOptions {
        corruption_levels: vec![0.0, 0.25, 0.5, 1.0, 2.0],
        ..AnalysisOptions::default()
    };
    let report = uncertainty_analysis(&model, &clean(57), &opts).unwrap();
    let levels: Vec<f64> = report
        .per_corruption_uncertainty
        .iter()
        .map(|l| l.mean_uncertainty)
        .collect();
    assert!(levels.windows(2).all(|w| w[1] > w[0]), "{levels:?}");
    assert_eq!(report.kendall_tau_mae, 1.0);
    assert_eq!(report.mae, 0.0);
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.violation_rate, 0.0);
}

#[test]
fn bins_are_sorted_and_reproduce_the_pooled_error() {
    let model = NoiseOracle {
        sigma_of: |eta| 0.1 + eta,
    };
    let test = clean(43);
    let opts = AnalysisOptions::default();
    let report = uncertainty_analysis(&model, &test, &opts).unwrap();
    assert_eq!(report.bin_table.len(), 10);
    let counts: Vec<usize> = report.bin_table.iter().map(|b| b.count).collect();
    assert_eq!(counts.iter().sum::<usize>(), 3 * 43);
    assert!(counts[..9].iter().all(|&c| c == 12));
    assert!(report
        .bin_table
        .windows(2)
        .all(|w| w[0].mean_uncertainty <= w[1].mean_uncertainty));

    let mut pooled_err = 0.0;
    let mut pooled_score = Vec::new();
    for (k, &level) in opts.corruption_levels.iter().enumerate() {
        let noisy = corrupt(&test, level, &mut substream(opts.seed, Stream::Eval, k as u32 + 1)).unwrap();
        for p in model.predict(&noisy.records).unwrap() {
            pooled_score.push(uncertainty_score(&p.gaussian));
        }
        pooled_err += noisy.records.iter().map(|r| r.noise_level).sum::<f64>();
    }
    let union_mae = pooled_err / (3.0 * 43.0);
    let weighted: f64 = report
        .bin_table
        .iter()
        .map(|b| b.mae * b.count as f64)
        .sum::<f64>()
        / (3.0 * 43.0);
    assert!((union_mae - weighted).abs() < 1e-12, "{union_mae} vs {weighted}");
    pooled_score.sort_by(f64::total_cmp);
    let first_bin = pooled_score[..12].iter().sum::<f64>() / 12.0;
    assert!((report.bin_table[0].mean_uncertainty - first_bin).abs() < 1e-12);
}

#[test]
fn constant_uncertainty_leaves_tau_undefined() {
    let model = NoiseOracle { sigma_of: |_| 0.7 };
    let report = uncertainty_analysis(&model, &clean(30), &AnalysisOptions::default()).unwrap();
    assert!(report.kendall_tau_mae.is_nan());
    assert!(report.kendall_tau_acc.is_nan());
    assert!(report.bin_table.iter().all(|b| b.mean_uncertainty == report.bin_table[0].mean_uncertainty));
    let json = report.to_json().unwrap();
    assert!(json.contains("\"kendall_tau_mae\": null"), "{json}");
}

#[test]
fn fewer_samples_than_bins_is_rejected() {
    let model = NoiseOracle { sigma_of: |_| 1.0 };
    let err = uncertainty_analysis(&model, &clean(9), &AnalysisOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn analysis_is_reproducible_for_a_seed() {
    let model = NoiseOracle {
        sigma_of: |eta| (1.0 + eta).ln() + 0.05,
    };
    let test = clean(40);
    let opts = AnalysisOptions {
        seed: 77,
        ..AnalysisOptions::default()
    };
    let a = uncertainty_analysis(&model, &test, &opts).unwrap();
    let b = uncertainty_analysis(&model, &test, &opts).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
