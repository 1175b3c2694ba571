//! Test metrics and the uncertainty/error correlation protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, Dataset};
use crate::error::{Error, Result};
use crate::gaussian::uncertainty_score;
use crate::model::{PoeModel, Prediction};
use crate::ordinal::{violation_rate, Metric};
use crate::rng::{substream, Stream};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: lengths {a} and {b} differ"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what} of empty sequences")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), targets.len(), "mae")?;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Fraction of exact class matches.
pub fn accuracy(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    check_lengths(predicted.len(), actual.len(), "accuracy")?;
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn tied_pairs(run_lengths: impl Iterator<Item = usize>) -> u64 {
    run_lengths.map(|t| (t as u64) * (t as u64 - 1) / 2).sum()
}

fn runs<T>(v: &[T], same: impl Fn(&T, &T) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=v.len() {
        if i == v.len() || !same(&v[i - 1], &v[i]) {
            out.push(i - start);
            start = i;
        }
    }
    out
}

/// Sorts by `key` and returns the number of inversions removed.
fn merge_sort_count(v: &mut [(f64, f64)], buf: &mut Vec<(f64, f64)>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut v[..mid], buf) + merge_sort_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].1 < v[i].1 {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b in `O(n log n)`.
///
/// Returns NaN when either sequence is constant, where the coefficient is
/// undefined.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "kendall_tau: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "kendall_tau needs at least 2 points, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall_tau input".into()));
    }
    let n = a.len() as u64;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let ties_a = tied_pairs(runs(&pairs, |x, y| x.0 == y.0).into_iter());
    let ties_joint = tied_pairs(runs(&pairs, |x, y| x == y).into_iter());
    let mut buf = Vec::with_capacity(pairs.len());
    let swaps = merge_sort_count(&mut pairs, &mut buf);
    let ties_b = tied_pairs(runs(&pairs, |x, y| x.1 == y.1).into_iter());
    let total = n * (n - 1) / 2;
    if ties_a == total || ties_b == total {
        return Ok(f64::NAN);
    }
    // concordant - discordant over pairs untied in both sequences.
    let net = total as f64 - ties_a as f64 - ties_b as f64 + ties_joint as f64 - 2.0 * swaps as f64;
    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    Ok((net / denom).clamp(-1.0, 1.0))
}

/// Anything that maps records to embedding distributions and decoded
/// predictions.
pub trait UncertaintyModel {
    fn predict(&self, records: &[crate::data::SampleRecord]) -> Result<Vec<Prediction>>;

    /// Distance used for the ordinal violation diagnostic.
    fn metric(&self) -> Metric;
}

impl UncertaintyModel for PoeModel {
    fn predict(&self, records: &[crate::data::SampleRecord]) -> Result<Vec<Prediction>> {
        PoeModel::predict(self, records)
    }

    fn metric(&self) -> Metric {
        self.config.metric
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub corruption_levels: Vec<f64>,
    pub seed: u64,
    pub bins: usize,
    /// Correlate per-example scores with per-example errors instead of
    /// per-bin means.
    pub example_level_tau: bool,
    pub violation_budget: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            corruption_levels: vec![0.0, 0.5, 1.0],
            seed: 0,
            bins: 10,
            example_level_tau: false,
            violation_budget: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub mean_uncertainty: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelUncertainty {
    pub level: f64,
    pub mean_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// On the uncorrupted set.
    pub mae: f64,
    pub accuracy: f64,
    pub violation_rate: f64,
    pub bin_table: Vec<BinRow>,
    /// NaN (null in JSON) when undefined.
    pub kendall_tau_mae: f64,
    pub kendall_tau_acc: f64,
    pub per_corruption_uncertainty: Vec<LevelUncertainty>,
}

/// Splits `n` sorted items into `bins` contiguous equal-count ranges, the
/// remainder going to the last one.
pub fn bin_ranges(n: usize, bins: usize) -> Vec<std::ops::Range<usize>> {
    let size = n / bins;
    (0..bins)
        .map(|k| {
            let end = if k + 1 == bins { n } else { (k + 1) * size };
            k * size..end
        })
        .collect()
}

/// Runs the corruption sweep and the binned correlation analysis.
///
/// Each level corrupts the clean set with its own evaluation sub-stream;
/// all corrupted copies are pooled, sorted by uncertainty score and cut
/// into equal-count bins.
pub fn uncertainty_analysis<M: UncertaintyModel + ?Sized>(
    model: &M,
    test: &Dataset,
    opts: &AnalysisOptions,
) -> Result<EvalReport> {
    if opts.bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {}",
            opts.bins
        )));
    }
    if test.len() < opts.bins {
        return Err(Error::InvalidArgument(format!(
            "uncertainty analysis needs at least {} samples, got {}",
            opts.bins,
            test.len()
        )));
    }
    if opts.corruption_levels.is_empty() {
        return Err(Error::InvalidArgument("no corruption levels".into()));
    }
    let clean = model.predict(&test.records)?;
    let estimates: Vec<f64> = clean.iter().map(|p| p.decoded.estimate).collect();
    let classes: Vec<usize> = clean.iter().map(|p| p.decoded.class).collect();
    let mae_clean = mae(&estimates, &test.targets())?;
    let acc_clean = accuracy(&classes, &test.classes())?;
    let gaussians: Vec<_> = clean.iter().map(|p| p.gaussian.clone()).collect();
    let mut vrng = substream(opts.seed, Stream::Eval, 0);
    let violations = violation_rate(
        &gaussians,
        &test.targets(),
        model.metric(),
        opts.violation_budget,
        &mut vrng,
    )?;

    // (score, absolute error, correct)
    let mut pooled: Vec<(f64, f64, f64)> =
        Vec::with_capacity(test.len() * opts.corruption_levels.len());
    let mut per_level = Vec::with_capacity(opts.corruption_levels.len());
    for (k, &level) in opts.corruption_levels.iter().enumerate() {
        let mut rng = substream(opts.seed, Stream::Eval, k as u32 + 1);
        let corrupted = corrupt(test, level, &mut rng)?;
        let preds = model.predict(&corrupted.records)?;
        let mut sum = 0.0;
        for (p, r) in preds.iter().zip(&corrupted.records) {
            let score = uncertainty_score(&p.gaussian);
            sum += score;
            pooled.push((
                score,
                (p.decoded.estimate - r.target).abs(),
                f64::from(u8::from(p.decoded.class == r.class_index)),
            ));
        }
        per_level.push(LevelUncertainty {
            level,
            mean_uncertainty: sum / preds.len() as f64,
        });
    }
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let bin_table: Vec<BinRow> = bin_ranges(pooled.len(), opts.bins)
        .into_iter()
        .map(|r| {
            let rows = &pooled[r];
            let n = rows.len() as f64;
            BinRow {
                mean_uncertainty: rows.iter().map(|x| x.0).sum::<f64>() / n,
                mae: rows.iter().map(|x| x.1).sum::<f64>() / n,
                accuracy: rows.iter().map(|x| x.2).sum::<f64>() / n,
                count: rows.len(),
            }
        })
        .collect();
    let (tau_mae, tau_acc) = if opts.example_level_tau {
        let s: Vec<f64> = pooled.iter().map(|x| x.0).collect();
        let e: Vec<f64> = pooled.iter().map(|x| x.1).collect();
        let c: Vec<f64> = pooled.iter().map(|x| x.2).collect();
        (kendall_tau(&s, &e)?, kendall_tau(&s, &c)?)
    } else {
        let s: Vec<f64> = bin_table.iter().map(|b| b.mean_uncertainty).collect();
        let e: Vec<f64> = bin_table.iter().map(|b| b.mae).collect();
        let c: Vec<f64> = bin_table.iter().map(|b| b.accuracy).collect();
        (kendall_tau(&s, &e)?, kendall_tau(&s, &c)?)
    };
    Ok(EvalReport {
        mae: mae_clean,
        accuracy: acc_clean,
        violation_rate: violations,
        bin_table,
        kendall_tau_mae: tau_mae,
        kendall_tau_acc: tau_acc,
        per_corruption_uncertainty: per_level,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("report serialisation: {e}")))
    }

    pub fn write_bins_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.bin_table)
    }

    pub fn write_uncertainty_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.per_corruption_uncertainty)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
