//! Regression heads on top of an embedding: direct regression,
//! classification over `C` bins, and ranking with `C - 1` binary
//! classifiers.
//!
//! All losses take a matrix of embedding rows (one row per Monte-Carlo
//! sample per example) plus per-row labels, and average over rows. When
//! every example contributes the same number of rows `T`, that mean is the
//! batch mean of the per-example `1/T` sample averages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::data::ClassBins;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Direct,
    Classification,
    Ranking,
}

impl HeadKind {
    /// Columns of the head weight matrix.
    pub fn output_width(self, classes: usize) -> usize {
        match self {
            HeadKind::Direct => 1,
            HeadKind::Classification => classes,
            HeadKind::Ranking => 2 * classes.saturating_sub(1),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            HeadKind::Direct => 0,
            HeadKind::Classification => 1,
            HeadKind::Ranking => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HeadKind::Direct),
            1 => Some(HeadKind::Classification),
            2 => Some(HeadKind::Ranking),
            _ => None,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Direct => "direct",
            HeadKind::Classification => "classification",
            HeadKind::Ranking => "ranking",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(HeadKind::Direct),
            "classification" => Ok(HeadKind::Classification),
            "ranking" => Ok(HeadKind::Ranking),
            other => Err(Error::InvalidArgument(format!(
                "unknown head kind {other:?} (expected direct, classification or ranking)"
            ))),
        }
    }
}

/// How a classification head turns logits into a continuous estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeStrategy {
    /// Center of the most probable class.
    #[default]
    Argmax,
    /// Softmax-weighted mean of class centers.
    Expectation,
}

/// Head weights stored as a `D x width` matrix so that `z · W` yields the
/// outputs for a row of embeddings.
///
/// * direct: `D x 1`, the vector `w`;
/// * classification: `D x C`, column `c - 1` is `w_c`;
/// * ranking: `D x 2(C-1)`, columns `2k` and `2k + 1` are `w_{k,0}` and
///   `w_{k,1}` of the `k`-th binary classifier (0-based `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub kind: HeadKind,
    pub classes: usize,
    pub weights: Tensor,
}

impl HeadParams {
    pub fn new(kind: HeadKind, classes: usize, weights: Tensor) -> Result<Self> {
        if classes < 2 && kind != HeadKind::Direct {
            return Err(Error::InvalidArgument(format!(
                "{kind} head needs at least 2 classes, got {classes}"
            )));
        }
        let width = kind.output_width(classes);
        if weights.cols() != width || weights.rows() == 0 {
            return Err(Error::Dimension(format!(
                "{kind} head with {classes} classes needs D x {width} weights, got {:?}",
                weights.shape()
            )));
        }
        Ok(HeadParams {
            kind,
            classes,
            weights,
        })
    }

    pub fn zeros(kind: HeadKind, dim: usize, classes: usize) -> Result<Self> {
        Self::new(
            kind,
            classes,
            Tensor::zeros(dim, kind.output_width(classes)),
        )
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    /// Places the weights on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        let weights = if trainable {
            tape.param(self.weights.clone())
        } else {
            tape.constant(self.weights.clone())
        };
        BoundHead {
            kind: self.kind,
            classes: self.classes,
            weights,
        }
    }

    /// Raw head outputs `z · W` for one embedding.
    pub fn outputs(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "embedding has {} dimensions, head expects {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(Tensor::row(z).matmul(&self.weights).into_data())
    }
}

/// Head weights living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub kind: HeadKind,
    pub classes: usize,
    pub weights: Var,
}

impl BoundHead {
    fn expect(&self, kind: HeadKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "{kind} loss applied to a {} head",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Binary "rank exceeds k" labels, `bits[k-1] = [c > k]` for `k = 1..C-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankLabels {
    bits: Vec<u8>,
}

impl RankLabels {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

pub fn make_rank_labels(class: usize, classes: usize) -> Result<RankLabels> {
    if class < 1 || class > classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} outside 1..={classes}"
        )));
    }
    Ok(RankLabels {
        bits: (1..classes).map(|k| u8::from(class > k)).collect(),
    })
}

fn check_rows(tape: &Tape, z: Var, n: usize, what: &str) -> Result<()> {
    let rows = tape.shape(z).0;
    if rows != n {
        return Err(Error::Dimension(format!(
            "{rows} embedding rows but {n} {what}"
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("loss over zero samples".into()));
    }
    Ok(())
}

/// Mean over rows of `(y - w·z)^2`.
pub fn loss_direct(tape: &mut Tape, head: &BoundHead, z: Var, targets: &[f64]) -> Result<Var> {
    head.expect(HeadKind::Direct)?;
    check_rows(tape, z, targets.len(), "targets")?;
    let pred = tape.matmul(z, head.weights)?;
    let y = tape.constant(Tensor::column(targets));
    let err = tape.sub(y, pred)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq, None))
}

fn one_hot(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        t.set(r, hot(r), 1.0);
    }
    t
}

/// Per-row negative log-softmax of the `hot` column.
fn cross_entropy_rows(tape: &mut Tape, logits: Var, hot: Tensor) -> Result<Var> {
    let lse = tape.log_sum_exp(logits, Axis::Cols)?;
    let mask = tape.constant(hot);
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum(picked, Some(Axis::Cols));
    tape.sub(lse, picked)
}

/// Mean over rows of `-log softmax(z·W)_c`. Classes are 1-based.
pub fn loss_classification(
    tape: &mut Tape,
    head: &BoundHead,
    z: Var,
    classes: &[usize],
) -> Result<Var> {
    head.expect(HeadKind::Classification)?;
    check_rows(tape, z, classes.len(), "class labels")?;
    if let Some(&c) = classes.iter().find(|&&c| c < 1 || c > head.classes) {
        return Err(Error::InvalidArgument(format!(
            "class {c} outside 1..={}",
            head.classes
        )));
    }
    let logits = tape.matmul(z, head.weights)?;
    let ce = cross_entropy_rows(
        tape,
        logits,
        one_hot(classes.len(), head.classes, |r| classes[r] - 1),
    )?;
    Ok(tape.mean(ce, None))
}

/// Mean over rows of the summed binary cross-entropies of the `C - 1`
/// ranking classifiers.
pub fn loss_ranking(
    tape: &mut Tape,
    head: &BoundHead,
    z: Var,
    labels: &[RankLabels],
) -> Result<Var> {
    head.expect(HeadKind::Ranking)?;
    check_rows(tape, z, labels.len(), "rank labels")?;
    let k_count = head.classes - 1;
    if let Some(l) = labels.iter().find(|l| l.bits.len() != k_count) {
        return Err(Error::Dimension(format!(
            "rank labels have length {}, expected {k_count}",
            l.bits.len()
        )));
    }
    let logits = tape.matmul(z, head.weights)?;
    let rows = labels.len();
    let mut total: Option<Var> = None;
    for k in 0..k_count {
        let pair = tape.slice(logits, Axis::Cols, 2 * k..2 * k + 2)?;
        let ce = cross_entropy_rows(
            tape,
            pair,
            one_hot(rows, 2, |r| usize::from(labels[r].bits[k])),
        )?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let total = total.expect("at least one ranking classifier");
    Ok(tape.mean(total, None))
}

/// Predicted class (1-based) and continuous estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub class: usize,
    pub estimate: f64,
}

/// Decodes the raw head outputs of one embedding.
///
/// Ranking sums the binary decisions as-is even when they are not monotone
/// in `k`; each decision is 1 only when the "exceeds" logit is strictly
/// larger.
pub fn decode_outputs(
    kind: HeadKind,
    outputs: &[f64],
    bins: &ClassBins,
    strategy: DecodeStrategy,
) -> Decoded {
    match kind {
        HeadKind::Direct => {
            let estimate = outputs[0];
            Decoded {
                class: bins.class_of(estimate),
                estimate,
            }
        }
        HeadKind::Classification => match strategy {
            DecodeStrategy::Argmax => {
                let mut best = 0;
                for (i, &v) in outputs.iter().enumerate() {
                    if v > outputs[best] {
                        best = i;
                    }
                }
                Decoded {
                    class: best + 1,
                    estimate: bins.center(best + 1),
                }
            }
            DecodeStrategy::Expectation => {
                let m = outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = outputs.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = w.iter().sum();
                let estimate = w
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p / total * bins.center(i + 1))
                    .sum::<f64>();
                Decoded {
                    class: bins.class_of(estimate),
                    estimate,
                }
            }
        },
        HeadKind::Ranking => {
            let class = 1 + outputs
                .chunks_exact(2)
                .filter(|pair| pair[1] > pair[0])
                .count();
            Decoded {
                class,
                estimate: bins.center(class),
            }
        }
    }
}

pub fn decode(
    head: &HeadParams,
    z: &[f64],
    bins: &ClassBins,
    strategy: DecodeStrategy,
) -> Result<Decoded> {
    Ok(decode_outputs(head.kind, &head.outputs(z)?, bins, strategy))
}
