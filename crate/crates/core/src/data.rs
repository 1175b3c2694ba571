//! Synthetic ordinal-regression data with per-example feature noise.
//!
//! Targets are uniform on `[y_min, y_max]` and features lie on a fixed
//! smooth curve through feature space, perturbed by isotropic Gaussian
//! noise whose scale `eta` is drawn per example from a mixture. The noise
//! scale is recorded on every record, which gives a ground-truth ordering
//! of how hard each example is.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, RunRng, Stream};

/// Angle swept by the first two feature coordinates over the target range.
pub const CURVE_SPAN: f64 = 1.5 * PI;
/// Amplitude of the polynomial feature coordinates.
pub const POLY_AMPLITUDE: f64 = 0.25;

/// `C` equal-width bins over `[min, max]`, numbered `1..=C`. Intervals are
/// half-open except the last, which is closed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBins {
    pub min: f64,
    pub max: f64,
    pub classes: usize,
}

impl ClassBins {
    pub fn new(min: f64, max: f64, classes: usize) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || min >= max {
            return Err(Error::InvalidArgument(format!(
                "target range [{min}, {max}] must be finite with min < max"
            )));
        }
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "class count must be positive".into(),
            ));
        }
        Ok(ClassBins { min, max, classes })
    }

    pub fn edge(&self, k: usize) -> f64 {
        if k == self.classes {
            return self.max;
        }
        self.min + k as f64 * (self.max - self.min) / self.classes as f64
    }

    /// Class of a value; values outside the range clamp to the end classes.
    pub fn class_of(&self, y: f64) -> usize {
        1 + (1..self.classes).filter(|&k| y >= self.edge(k)).count()
    }

    pub fn center(&self, class: usize) -> f64 {
        0.5 * (self.edge(class - 1) + self.edge(class))
    }

    pub fn centers(&self) -> Vec<f64> {
        (1..=self.classes).map(|c| self.center(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub features: usize,
    pub classes: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub base_noise: f64,
    /// `(eta, probability)` components.
    pub noise_mixture: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 4000,
            features: 8,
            classes: 5,
            y_min: 0.0,
            y_max: 10.0,
            base_noise: 0.0,
            noise_mixture: vec![(0.1, 0.5), (1.0, 0.5)],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.features < 2 {
            return bad(format!(
                "features must be at least 2, got {}",
                self.features
            ));
        }
        ClassBins::new(self.y_min, self.y_max, self.classes)?;
        if !non_negative(self.base_noise) {
            return bad(format!("base_noise must be >= 0, got {}", self.base_noise));
        }
        if self.noise_mixture.is_empty() {
            return bad("noise_mixture needs at least one component".into());
        }
        for &(eta, p) in &self.noise_mixture {
            if !non_negative(eta) || !non_negative(p) {
                return bad(format!(
                    "mixture component ({eta}, {p}) must be non-negative"
                ));
            }
        }
        let total: f64 = self.noise_mixture.iter().map(|c| c.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture probabilities sum to {total}, expected 1"));
        }
        Ok(())
    }

    pub fn bins(&self) -> ClassBins {
        ClassBins {
            min: self.y_min,
            max: self.y_max,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub features: Vec<f64>,
    pub target: f64,
    pub class_index: usize,
    /// Standard deviation of the isotropic noise actually added.
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.target).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_index).collect()
    }

    pub fn features_tensor(&self) -> Tensor {
        features_tensor(&self.records)
    }

    /// Splits off the trailing `fraction` of records as a holdout set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must be in [0, 1), got {fraction}"
            )));
        }
        let n_test = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - n_test;
        Ok((
            Dataset::new(self.records[..cut].to_vec()),
            Dataset::new(self.records[cut..].to_vec()),
        ))
    }
}

pub fn features_tensor(records: &[SampleRecord]) -> Tensor {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    Tensor::from_rows(&rows).expect("records share a feature dimension")
}

/// Noise-free feature vector for a target.
pub fn curve_point(spec: &DatasetSpec, y: f64) -> Vec<f64> {
    let u = (y - spec.y_min) / (spec.y_max - spec.y_min);
    let angle = CURVE_SPAN * u;
    let s = 2.0 * u - 1.0;
    let mut f = Vec::with_capacity(spec.features);
    f.push(angle.cos());
    f.push(angle.sin());
    for k in 2..spec.features {
        f.push(POLY_AMPLITUDE * s.powi(k as i32 - 1));
    }
    f
}

fn pick_component(mixture: &[(f64, f64)], u: f64) -> f64 {
    let mut acc = 0.0;
    for &(eta, p) in mixture {
        acc += p;
        if u < acc {
            return eta;
        }
    }
    mixture.last().expect("validated non-empty").0
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let bins = spec.bins();
    let mut rng = stream(spec.seed, Stream::Data);
    let records = (0..spec.n_samples)
        .map(|_| {
            let target = rng.random_range(spec.y_min..=spec.y_max);
            let eta_mix = pick_component(&spec.noise_mixture, rng.random::<f64>());
            let eta = spec.base_noise.hypot(eta_mix);
            let features = curve_point(spec, target)
                .into_iter()
                .map(|v| v + eta * rng.sample::<f64, _>(StandardNormal))
                .collect();
            SampleRecord {
                features,
                target,
                class_index: bins.class_of(target),
                noise_level: eta,
            }
        })
        .collect();
    Ok(Dataset { records })
}

/// False for negative values and NaN.
fn non_negative(x: f64) -> bool {
    x >= 0.0
}

/// Adds `extra_noise` times fresh standard-normal noise to every feature.
/// Independent noise adds in quadrature, so `noise_level` becomes
/// `hypot(noise_level, extra_noise)`.
pub fn corrupt(dataset: &Dataset, extra_noise: f64, rng: &mut RunRng) -> Result<Dataset> {
    if !non_negative(extra_noise) {
        return Err(Error::InvalidArgument(format!(
            "corruption level must be >= 0, got {extra_noise}"
        )));
    }
    if extra_noise == 0.0 {
        return Ok(dataset.clone());
    }
    let records = dataset
        .records
        .iter()
        .map(|r| SampleRecord {
            features: r
                .features
                .iter()
                .map(|v| v + extra_noise * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            target: r.target,
            class_index: r.class_index,
            noise_level: r.noise_level.hypot(extra_noise),
        })
        .collect();
    Ok(Dataset { records })
}

fn header(features: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..features).map(|i| format!("feat_{i}")).collect();
    h.extend(["target", "class_index", "noise_level"].map(String::from));
    h
}

/// Writes the dataset as CSV. Floats use the shortest representation that
/// round-trips exactly.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header(dataset.feature_dim()).join(","));
    out.push('\n');
    for r in &dataset.records {
        for v in &r.features {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!(
            "{:?},{},{:?}\n",
            r.target, r.class_index, r.noise_level
        ));
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = reader.records();
    let head = match rows.next() {
        None => return Err(Error::EmptyDataset(path.to_path_buf())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    if head.len() < 4 {
        return Err(parse_err(
            1,
            format!("header has {} columns, expected at least 4", head.len()),
        ));
    }
    let features = head.len() - 3;
    let expected = header(features);
    if let Some((i, (got, want))) = head
        .iter()
        .zip(&expected)
        .enumerate()
        .find(|(_, (g, w))| g != w)
    {
        return Err(parse_err(
            1,
            format!("column {i} is named {got:?}, expected {want:?}"),
        ));
    }

    let mut records = Vec::new();
    for row in rows {
        let row =
            row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != head.len() {
            return Err(parse_err(
                line,
                format!("row has {} columns, header has {}", row.len(), head.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            row[i].trim().parse::<f64>().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "column {} ({:?}) is not a number: {:?}",
                        i, expected[i], &row[i]
                    ),
                )
            })
        };
        let feats = (0..features).map(num).collect::<Result<Vec<_>>>()?;
        let target = num(features)?;
        let class_index = row[features + 1].trim().parse::<usize>().map_err(|_| {
            parse_err(
                line,
                format!(
                    "class_index is not a positive integer: {:?}",
                    &row[features + 1]
                ),
            )
        })?;
        let noise_level = num(features + 2)?;
        records.push(SampleRecord {
            features: feats,
            target,
            class_index,
            noise_level,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(Dataset { records })
}
