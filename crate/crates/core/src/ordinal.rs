//! Ordinal distribution constraint between embedding distributions.
//!
//! For a triplet `(l, m, n)` with `|y_l - y_m| < |y_l - y_n|` the embedding
//! of `m` should be closer to `l` than the embedding of `n` is, by a margin,
//! under a distance between Gaussians. Triplets are mined per batch from
//! label distances alone.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, DiagonalGaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Symmetrised KL divergence.
    Skl,
    /// Squared 2-Wasserstein distance.
    W2Squared,
}

impl Metric {
    /// Default hinge margin for this metric.
    pub fn default_margin(self) -> f64 {
        match self {
            Metric::Skl => 5.0,
            Metric::W2Squared => 100.0,
        }
    }

    pub fn distance(self, a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
        match self {
            Metric::Skl => gaussian::skl(a, b),
            Metric::W2Squared => gaussian::w2_squared(a, b),
        }
    }

    /// Row-wise distance between `N x D` parameter blocks, as an `N x 1` node.
    pub fn distance_var(
        self,
        tape: &mut Tape,
        mu_a: Var,
        sigma_a: Var,
        mu_b: Var,
        sigma_b: Var,
    ) -> Result<Var> {
        match self {
            Metric::Skl => gaussian::skl_var(tape, mu_a, sigma_a, mu_b, sigma_b),
            Metric::W2Squared => gaussian::w2_squared_var(tape, mu_a, sigma_a, mu_b, sigma_b),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Metric::Skl => 0,
            Metric::W2Squared => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::Skl),
            1 => Some(Metric::W2Squared),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Skl => "skl",
            Metric::W2Squared => "w2-squared",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skl" => Ok(Metric::Skl),
            "w2" | "w2-squared" | "w2_squared" => Ok(Metric::W2Squared),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric {other:?} (expected skl or w2-squared)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdinalConfig {
    pub metric: Metric,
    pub margin: f64,
}

impl OrdinalConfig {
    pub fn new(metric: Metric, margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be > 0, got {margin}"
            )));
        }
        Ok(OrdinalConfig { metric, margin })
    }
}

/// Batch indices with `|y[anchor] - y[near]| < |y[anchor] - y[far]|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub near: usize,
    pub far: usize,
}

/// Online hard-example mining.
///
/// Every index is an anchor in turn, paired with the next index in the
/// batch (wrapping at the end). The third element is the remaining index
/// whose label distance to the anchor is closest to the pair's, excluding
/// exact ties; the first such index wins when several are equally close.
/// If the mined element turns out closer to the anchor than the pair
/// partner, the two swap roles. Anchors without any non-tied candidate
/// produce no triplet.
pub fn mine_triplets(labels: &[f64]) -> Result<Vec<Triplet>> {
    let n = labels.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "triplet mining needs a batch of at least 3, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for anchor in 0..n {
        let partner = (anchor + 1) % n;
        let d_partner = (labels[anchor] - labels[partner]).abs();
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..n).filter(|&c| c != anchor && c != partner) {
            let d = (labels[anchor] - labels[cand]).abs();
            if d == d_partner {
                continue;
            }
            let gap = (d_partner - d).abs();
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((cand, gap));
            }
        }
        let Some((third, _)) = best else { continue };
        let d_third = (labels[anchor] - labels[third]).abs();
        let (near, far) = if d_partner < d_third {
            (partner, third)
        } else {
            (third, partner)
        };
        out.push(Triplet { anchor, near, far });
    }
    Ok(out)
}

fn check_indices(triplets: &[Triplet], len: usize) -> Result<()> {
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= len || t.near >= len || t.far >= len)
    {
        return Err(Error::InvalidArgument(format!(
            "triplet {t:?} indexes outside a batch of {len}"
        )));
    }
    Ok(())
}

/// Mean hinge `max(0, d(l, m) + margin - d(l, n))` over the triplets; 0 when
/// there are none.
pub fn ordinal_loss_value(
    gaussians: &[DiagonalGaussian],
    triplets: &[Triplet],
    cfg: &OrdinalConfig,
) -> Result<f64> {
    check_indices(triplets, gaussians.len())?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in triplets {
        let near = cfg
            .metric
            .distance(&gaussians[t.anchor], &gaussians[t.near])?;
        let far = cfg
            .metric
            .distance(&gaussians[t.anchor], &gaussians[t.far])?;
        total += (near + cfg.margin - far).max(0.0);
    }
    Ok(total / triplets.len() as f64)
}

fn selector(rows: usize, cols: usize, pick: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        t.set(r, pick(r), 1.0);
    }
    t
}

/// Tape version over a batch's `B x D` mean and sigma nodes.
pub fn ordinal_loss(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    triplets: &[Triplet],
    cfg: &OrdinalConfig,
) -> Result<Var> {
    let batch = tape.shape(mu).0;
    check_indices(triplets, batch)?;
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = triplets.len();
    let mut gather = |pick: &dyn Fn(&Triplet) -> usize| -> Result<(Var, Var)> {
        let s = tape.constant(selector(n, batch, |r| pick(&triplets[r])));
        Ok((tape.matmul(s, mu)?, tape.matmul(s, sigma)?))
    };
    let (mu_l, sig_l) = gather(&|t| t.anchor)?;
    let (mu_m, sig_m) = gather(&|t| t.near)?;
    let (mu_n, sig_n) = gather(&|t| t.far)?;
    let d_near = cfg.metric.distance_var(tape, mu_l, sig_l, mu_m, sig_m)?;
    let d_far = cfg.metric.distance_var(tape, mu_l, sig_l, mu_n, sig_n)?;
    let diff = tape.sub(d_near, d_far)?;
    let shifted = tape.add_scalar(diff, cfg.margin)?;
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge, None))
}

/// Fraction of sampled valid triplets whose embedding distances invert the
/// label order (`d(l, m) >= d(l, n)`).
///
/// Triplets are drawn uniformly with replacement; label ties are rejected.
/// At most `50 * budget` draws are attempted, and a set with no valid
/// triplet at all reports 0.
pub fn violation_rate<R: Rng + ?Sized>(
    gaussians: &[DiagonalGaussian],
    labels: &[f64],
    metric: Metric,
    budget: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = gaussians.len();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "violation rate needs at least 3 examples, got {n}"
        )));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument(
            "triplet budget must be positive".into(),
        ));
    }
    let max_attempts = budget.saturating_mul(50);
    let (mut valid, mut violated, mut attempts) = (0usize, 0usize, 0usize);
    while valid < budget && attempts < max_attempts {
        attempts += 1;
        let l = rng.random_range(0..n);
        let m = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if l == m || l == k || m == k {
            continue;
        }
        let (dm, dk) = ((labels[l] - labels[m]).abs(), (labels[l] - labels[k]).abs());
        if dm == dk {
            continue;
        }
        let (near, far) = if dm < dk { (m, k) } else { (k, m) };
        valid += 1;
        let d_near = metric.distance(&gaussians[l], &gaussians[near])?;
        let d_far = metric.distance(&gaussians[l], &gaussians[far])?;
        if d_near >= d_far {
            violated += 1;
        }
    }
    if valid == 0 {
        return Ok(0.0);
    }
    Ok(violated as f64 / valid as f64)
}
