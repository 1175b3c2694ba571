//! The probabilistic ordinal embedding model.
//!
//! An MLP backbone feeds two branches: an affine mean head producing
//! `mu(x)` and an affine + batch-norm + `exp` head producing the per-dimension
//! standard deviations. During training, embeddings are sampled with the
//! reparameterisation trick and fed to a regression head; inference uses
//! `mu(x)` directly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::data::{features_tensor, ClassBins, Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::gaussian::{self, DiagonalGaussian};
use crate::heads::{self, BoundHead, DecodeStrategy, Decoded, HeadKind, HeadParams, RankLabels};
use crate::ordinal::{self, Metric, OrdinalConfig};
use crate::rng::{stream, RunRng, Stream};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which loss ingredients are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Point embeddings `z = mu(x)`, head loss only.
    #[serde(rename = "deterministic-baseline")]
    DeterministicBaseline,
    /// Sampled embeddings, head loss only.
    #[serde(rename = "p-emb")]
    PEmb,
    #[serde(rename = "p-emb+ord")]
    PEmbOrd,
    #[serde(rename = "p-emb+vib")]
    PEmbVib,
    #[default]
    #[serde(rename = "full-poe")]
    FullPoe,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::DeterministicBaseline,
        Mode::PEmb,
        Mode::PEmbOrd,
        Mode::PEmbVib,
        Mode::FullPoe,
    ];

    pub fn samples(self) -> bool {
        self != Mode::DeterministicBaseline
    }

    pub fn uses_ordinal(self) -> bool {
        matches!(self, Mode::PEmbOrd | Mode::FullPoe)
    }

    pub fn uses_vib(self) -> bool {
        matches!(self, Mode::PEmbVib | Mode::FullPoe)
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Mode::ALL.get(usize::from(code)).copied()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DeterministicBaseline => "deterministic-baseline",
            Mode::PEmb => "p-emb",
            Mode::PEmbOrd => "p-emb+ord",
            Mode::PEmbVib => "p-emb+vib",
            Mode::FullPoe => "full-poe",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown mode {s:?} (expected one of deterministic-baseline, p-emb, p-emb+ord, p-emb+vib, full-poe)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub metric: Metric,
    pub margin: f64,
    /// Weight of the ordinal constraint.
    pub alpha: f64,
    /// Weight of the VIB regulariser.
    pub beta: f64,
    /// Monte-Carlo samples per example.
    pub samples: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub decode: DecodeStrategy,
    pub target_min: f64,
    pub target_max: f64,
    /// Trailing fraction of a dataset held out for test metrics.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadKind::Classification,
            metric: Metric::Skl,
            margin: Metric::Skl.default_margin(),
            alpha: 1e-4,
            beta: 1e-5,
            samples: 50,
            embed_dim: 16,
            classes: 5,
            hidden: vec![64, 32],
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            mode: Mode::FullPoe,
            decode: DecodeStrategy::Argmax,
            target_min: 0.0,
            target_max: 10.0,
            holdout_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        OrdinalConfig::new(self.metric, self.margin)?;
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!(
                "hidden sizes must be positive, got {:?}",
                self.hidden
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.ordinal_active() && self.batch_size < 3 {
            return bad(format!(
                "batch_size must be at least 3 when the ordinal term is on, got {}",
                self.batch_size
            ));
        }
        if !(self.holdout_fraction >= 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        ClassBins::new(self.target_min, self.target_max, self.classes)?;
        if self.head != HeadKind::Direct && self.classes < 2 {
            return bad(format!("{} head needs at least 2 classes", self.head));
        }
        Ok(())
    }

    pub fn bins(&self) -> ClassBins {
        ClassBins {
            min: self.target_min,
            max: self.target_max,
            classes: self.classes,
        }
    }

    fn ordinal_active(&self) -> bool {
        self.mode.uses_ordinal() && self.alpha > 0.0
    }

    fn vib_active(&self) -> bool {
        self.mode.uses_vib() && self.beta > 0.0
    }

    /// Monte-Carlo samples actually drawn per example.
    pub fn effective_samples(&self) -> usize {
        if self.mode.samples() {
            self.samples
        } else {
            1
        }
    }
}

/// Affine layer `x · W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut RunRng) -> Self {
        let normal = Normal::new(0.0, (gain / inputs as f64).sqrt()).expect("valid std");
        Linear {
            weight: Tensor::from_fn(inputs, outputs, |_, _| normal.sample(rng)),
            bias: Tensor::zeros(1, outputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    /// Running unbiased variance.
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(1, dim, 1.0),
            beta: Tensor::zeros(1, dim),
            running_mean: Tensor::zeros(1, dim),
            running_var: Tensor::full(1, dim, 1.0),
        }
    }

    fn update(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = BN_MOMENTUM;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(stats.mean.data())
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Batch statistics of the pre-normalisation sigma activations.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Biased variance.
    pub var: Tensor,
    pub count: usize,
}

/// Model parameters placed on a tape, in declared order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub hidden: Vec<(Var, Var)>,
    pub mu: (Var, Var),
    pub sigma: (Var, Var),
    pub gamma: Var,
    pub beta: Var,
    pub head: BoundHead,
}

/// Mean and sigma nodes for a batch, both `B x D`.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub mu: Var,
    pub sigma: Var,
    pub stats: Option<BatchStats>,
}

/// Per-row supervision for one head kind.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadTargets {
    Direct(Vec<f64>),
    Classification(Vec<usize>),
    Ranking(Vec<RankLabels>),
}

impl HeadTargets {
    pub fn from_records(kind: HeadKind, classes: usize, records: &[SampleRecord]) -> Result<Self> {
        Ok(match kind {
            HeadKind::Direct => HeadTargets::Direct(records.iter().map(|r| r.target).collect()),
            HeadKind::Classification => {
                HeadTargets::Classification(records.iter().map(|r| r.class_index).collect())
            }
            HeadKind::Ranking => HeadTargets::Ranking(
                records
                    .iter()
                    .map(|r| heads::make_rank_labels(r.class_index, classes))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// The targets tiled `times` times, matching sample-major embedding rows.
    pub fn repeat(&self, times: usize) -> Self {
        fn tile<T: Clone>(v: &[T], times: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(v.len() * times);
            for _ in 0..times {
                out.extend_from_slice(v);
            }
            out
        }
        match self {
            HeadTargets::Direct(v) => HeadTargets::Direct(tile(v, times)),
            HeadTargets::Classification(v) => HeadTargets::Classification(tile(v, times)),
            HeadTargets::Ranking(v) => HeadTargets::Ranking(tile(v, times)),
        }
    }
}

/// Head loss for embedding rows `z`, averaged over rows.
pub fn head_loss(tape: &mut Tape, head: &BoundHead, z: Var, targets: &HeadTargets) -> Result<Var> {
    match targets {
        HeadTargets::Direct(y) => heads::loss_direct(tape, head, z, y),
        HeadTargets::Classification(c) => heads::loss_classification(tape, head, z, c),
        HeadTargets::Ranking(l) => heads::loss_ranking(tape, head, z, l),
    }
}

/// Head loss over `T` reparameterised samples per example.
///
/// `mu` and `sigma` are `B x D`; `epsilon` is `(T·B) x D` with row
/// `t·B + i` holding sample `t` of example `i`.
pub fn sampled_head_loss(
    tape: &mut Tape,
    head: &BoundHead,
    mu: Var,
    sigma: Var,
    epsilon: &Tensor,
    targets: &HeadTargets,
) -> Result<Var> {
    let (b, d) = tape.shape(mu);
    if epsilon.cols() != d || b == 0 || !epsilon.rows().is_multiple_of(b) || epsilon.rows() == 0 {
        return Err(Error::Dimension(format!(
            "noise of shape {:?} does not tile a {b} x {d} batch",
            epsilon.shape()
        )));
    }
    let t = epsilon.rows() / b;
    let (mu_t, sigma_t) = if t == 1 {
        (mu, sigma)
    } else {
        (
            tape.concat(&vec![mu; t], Axis::Rows)?,
            tape.concat(&vec![sigma; t], Axis::Rows)?,
        )
    };
    let eps = tape.constant(epsilon.clone());
    let z = gaussian::reparameterize_var(tape, mu_t, sigma_t, eps)?;
    head_loss(tape, head, z, &targets.repeat(t))
}

/// The weighted objective and its ingredients as tape nodes.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub head: Var,
    pub ordinal: Option<Var>,
    pub vib: Option<Var>,
    pub stats: Option<BatchStats>,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub head: f64,
    pub ordinal: f64,
    pub vib: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossValues {
            total: tape.value(self.total).item(),
            head: tape.value(self.head).item(),
            ordinal: get(self.ordinal),
            vib: get(self.vib),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoeModel {
    pub config: TrainConfig,
    pub input_dim: usize,
    pub hidden: Vec<Linear>,
    pub mu_head: Linear,
    pub sigma_head: Linear,
    pub bn: BatchNorm,
    pub head: HeadParams,
}

/// An embedding distribution and its decoded prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub gaussian: DiagonalGaussian,
    pub decoded: Decoded,
}

impl PoeModel {
    /// Fresh model initialised from the config's seed.
    pub fn new(input_dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidArgument(
                "input dimension must be positive".into(),
            ));
        }
        let mut rng = stream(config.seed, Stream::Init);
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut width = input_dim;
        for &h in &config.hidden {
            hidden.push(Linear::init(width, h, 2.0, &mut rng));
            width = h;
        }
        let d = config.embed_dim;
        let mu_head = Linear::init(width, d, 1.0, &mut rng);
        let sigma_head = Linear::init(width, d, 1.0, &mut rng);
        let hw = config.head.output_width(config.classes);
        let head_std = (1.0 / d as f64).sqrt();
        let head_w = Tensor::from_fn(d, hw, |_, _| {
            let e: f64 = rng.sample(StandardNormal);
            head_std * e
        });
        let head = HeadParams::new(config.head, config.classes, head_w)?;
        Ok(PoeModel {
            input_dim,
            hidden,
            mu_head,
            sigma_head,
            bn: BatchNorm::new(d),
            head,
            config,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Trainable parameters in declared order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.mu_head.weight,
            &self.mu_head.bias,
            &self.sigma_head.weight,
            &self.sigma_head.bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.head.weights,
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.mu_head.weight,
            &mut self.mu_head.bias,
            &mut self.sigma_head.weight,
            &mut self.sigma_head.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.head.weights,
        ]);
        out
    }

    /// Names matching [`parameters`](Self::parameters).
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("hidden.{i}.weight"));
            out.push(format!("hidden.{i}.bias"));
        }
        for n in [
            "mu_head.weight",
            "mu_head.bias",
            "sigma_head.weight",
            "sigma_head.bias",
            "bn.gamma",
            "bn.beta",
            "head.weights",
        ] {
            out.push(n.to_string());
        }
        out
    }

    /// CRC32 over all parameters and batch-norm running statistics.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self
            .parameters()
            .into_iter()
            .chain([&self.bn.running_mean, &self.bn.running_var])
        {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Places the parameters on a tape as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_vars(&vars)
    }

    /// Interprets existing tape nodes as the parameters, in declared order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundModel {
        assert_eq!(vars.len(), 2 * self.hidden.len() + 7, "parameter count");
        let hidden = (0..self.hidden.len())
            .map(|i| (vars[2 * i], vars[2 * i + 1]))
            .collect();
        let k = 2 * self.hidden.len();
        BoundModel {
            hidden,
            mu: (vars[k], vars[k + 1]),
            sigma: (vars[k + 2], vars[k + 3]),
            gamma: vars[k + 4],
            beta: vars[k + 5],
            head: BoundHead {
                kind: self.head.kind,
                classes: self.head.classes,
                weights: vars[k + 6],
            },
        }
    }

    /// Forward pass of a `B x F` feature block.
    ///
    /// With `training`, batch-norm normalises with the batch statistics and
    /// returns them; otherwise it uses the running statistics.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        p: &BoundModel,
        x: Var,
        training: bool,
    ) -> Result<ForwardPass> {
        let (b, f) = tape.shape(x);
        if f != self.input_dim {
            return Err(Error::Dimension(format!(
                "features have {f} columns, model expects {}",
                self.input_dim
            )));
        }
        if b == 0 {
            return Err(Error::InvalidArgument(
                "forward pass over an empty batch".into(),
            ));
        }
        let mut h = x;
        for &(w, bias) in &p.hidden {
            let a = affine(tape, h, w, bias)?;
            h = tape.relu(a);
        }
        let mu = affine(tape, h, p.mu.0, p.mu.1)?;
        let s = affine(tape, h, p.sigma.0, p.sigma.1)?;
        let d = self.embed_dim();
        let (normalized, stats) = if training {
            let mean = tape.mean(s, Some(Axis::Rows));
            let mean_b = tape.broadcast(mean, (b, d))?;
            let centered = tape.sub(s, mean_b)?;
            let sq = tape.square(centered);
            let var = tape.mean(sq, Some(Axis::Rows));
            let shifted = tape.add_scalar(var, BN_EPS)?;
            let std = tape.sqrt(shifted)?;
            let inv = tape.recip_positive(std)?;
            let inv_b = tape.broadcast(inv, (b, d))?;
            let stats = BatchStats {
                mean: tape.value(mean).clone(),
                var: tape.value(var).clone(),
                count: b,
            };
            (tape.mul(centered, inv_b)?, Some(stats))
        } else {
            let rm = tape.constant(self.bn.running_mean.clone());
            let inv = self.bn.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let rm_b = tape.broadcast(rm, (b, d))?;
            let centered = tape.sub(s, rm_b)?;
            let inv = tape.constant(inv);
            let inv_b = tape.broadcast(inv, (b, d))?;
            (tape.mul(centered, inv_b)?, None)
        };
        let gamma_b = tape.broadcast(p.gamma, (b, d))?;
        let beta_b = tape.broadcast(p.beta, (b, d))?;
        let scaled = tape.mul(normalized, gamma_b)?;
        let log_sigma = tape.add(scaled, beta_b)?;
        let sigma = tape.exp(log_sigma);
        Ok(ForwardPass { mu, sigma, stats })
    }

    /// Embedding distributions for a `B x F` block of features.
    pub fn forward_batch(&self, x: &Tensor, training: bool) -> Result<Vec<DiagonalGaussian>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &p, xv, training)?;
        let (mu, sigma) = (tape.value(out.mu), tape.value(out.sigma));
        (0..x.rows())
            .map(|r| DiagonalGaussian::new(mu.row_slice(r).to_vec(), sigma.row_slice(r).to_vec()))
            .collect()
    }

    /// Embedding distribution of one feature vector. With `training` the
    /// batch-norm statistics come from this single example.
    pub fn forward(&self, features: &[f64], training: bool) -> Result<DiagonalGaussian> {
        let mut out = self.forward_batch(&Tensor::row(features), training)?;
        Ok(out.remove(0))
    }

    /// Inference: embeddings from running statistics, decoded from `mu`.
    pub fn predict(&self, records: &[SampleRecord]) -> Result<Vec<Prediction>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let bins = self.config.bins();
        let gaussians = self.forward_batch(&features_tensor(records), false)?;
        gaussians
            .into_iter()
            .map(|g| {
                let decoded = heads::decode(&self.head, g.mu(), &bins, self.config.decode)?;
                Ok(Prediction {
                    gaussian: g,
                    decoded,
                })
            })
            .collect()
    }

    /// Standard-normal noise for one batch, `(T·B) x D`, or `None` when the
    /// mode does not sample.
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Tensor> {
        if !self.config.mode.samples() {
            return None;
        }
        let rows = self.config.samples * batch;
        Some(Tensor::from_fn(rows, self.embed_dim(), |_, _| {
            rng.sample(StandardNormal)
        }))
    }

    /// The full objective for one batch:
    /// `head + alpha · ordinal + beta · mean VIB`, with ingredients switched
    /// by the mode.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        p: &BoundModel,
        batch: &[SampleRecord],
        epsilon: Option<&Tensor>,
    ) -> Result<LossTerms> {
        let cfg = &self.config;
        let x = tape.constant(features_tensor(batch));
        let fwd = self.forward_on(tape, p, x, true)?;
        let targets = HeadTargets::from_records(cfg.head, cfg.classes, batch)?;
        let head = if cfg.mode.samples() {
            let eps = epsilon.ok_or_else(|| {
                Error::InvalidArgument(format!("mode {} needs sampling noise", cfg.mode))
            })?;
            sampled_head_loss(tape, &p.head, fwd.mu, fwd.sigma, eps, &targets)?
        } else {
            head_loss(tape, &p.head, fwd.mu, &targets)?
        };
        let mut total = head;
        let ordinal = if cfg.ordinal_active() {
            let labels: Vec<f64> = batch.iter().map(|r| r.target).collect();
            let triplets = ordinal::mine_triplets(&labels)?;
            let oc = OrdinalConfig::new(cfg.metric, cfg.margin)?;
            let l = ordinal::ordinal_loss(tape, fwd.mu, fwd.sigma, &triplets, &oc)?;
            let w = tape.scale(l, cfg.alpha);
            total = tape.add(total, w)?;
            Some(l)
        } else {
            None
        };
        let vib = if cfg.vib_active() {
            let per = gaussian::vib_kl_var(tape, fwd.mu, fwd.sigma)?;
            let l = tape.mean(per, None);
            let w = tape.scale(l, cfg.beta);
            total = tape.add(total, w)?;
            Some(l)
        } else {
            None
        };
        Ok(LossTerms {
            total,
            head,
            ordinal,
            vib,
            stats: fwd.stats,
        })
    }

    /// Writes the model file: magic, version, payload length, payload,
    /// CRC32 of everything before it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Writer::default();
        let c = &self.config;
        body.u32(self.input_dim);
        body.u32(c.embed_dim);
        body.u32(c.classes);
        body.u32(c.hidden.len());
        for &h in &c.hidden {
            body.u32(h);
        }
        body.0.extend([
            c.head.code(),
            c.metric.code(),
            c.mode.code(),
            decode_code(c.decode),
        ]);
        for v in [
            c.margin,
            c.alpha,
            c.beta,
            c.learning_rate,
            c.target_min,
            c.target_max,
            c.holdout_fraction,
        ] {
            body.f64(v);
        }
        body.u32(c.samples);
        body.u32(c.batch_size);
        body.u32(c.epochs);
        body.0.extend(c.seed.to_le_bytes());
        for t in self
            .parameters()
            .into_iter()
            .chain([&self.bn.running_mean, &self.bn.running_var])
        {
            body.u32(t.rows());
            body.u32(t.cols());
            for &v in t.data() {
                body.f64(v);
            }
        }
        let mut out = Vec::with_capacity(body.0.len() + 20);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((body.0.len() as u64).to_le_bytes());
        out.extend(&body.0);
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 16;
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::ModelFormat(
                "not a model file (bad magic bytes)".into(),
            ));
        }
        if bytes.len() < HEADER + 4 {
            return Err(Error::ModelFormat(format!(
                "truncated file ({} bytes)",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let expected = (HEADER as u64).saturating_add(body_len).saturating_add(4);
        if (bytes.len() as u64) < expected {
            return Err(Error::ModelFormat(format!(
                "truncated file: {} bytes, header announces {expected}",
                bytes.len()
            )));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes after the checksum",
                bytes.len() as u64 - expected
            )));
        }
        let split = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..split]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let mut r = Reader {
            buf: &bytes[HEADER..split],
            pos: 0,
        };
        let input_dim = r.u32()?;
        let embed_dim = r.u32()?;
        let classes = r.u32()?;
        let n_hidden = r.u32()?;
        let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let codes = r.take(4)?;
        let head = HeadKind::from_code(codes[0])
            .ok_or_else(|| Error::ModelFormat(format!("unknown head code {}", codes[0])))?;
        let metric = Metric::from_code(codes[1])
            .ok_or_else(|| Error::ModelFormat(format!("unknown metric code {}", codes[1])))?;
        let mode = Mode::from_code(codes[2])
            .ok_or_else(|| Error::ModelFormat(format!("unknown mode code {}", codes[2])))?;
        let decode = decode_from_code(codes[3])
            .ok_or_else(|| Error::ModelFormat(format!("unknown decode code {}", codes[3])))?;
        let mut floats = [0.0; 7];
        for f in &mut floats {
            *f = r.f64()?;
        }
        let [margin, alpha, beta, learning_rate, target_min, target_max, holdout_fraction] = floats;
        let samples = r.u32()?;
        let batch_size = r.u32()?;
        let epochs = r.u32()?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = TrainConfig {
            head,
            metric,
            margin,
            alpha,
            beta,
            samples,
            embed_dim,
            classes,
            hidden,
            learning_rate,
            batch_size,
            epochs,
            seed,
            mode,
            decode,
            target_min,
            target_max,
            holdout_fraction,
        };
        config
            .validate()
            .map_err(|e| Error::ModelFormat(format!("invalid config block: {e}")))?;
        if input_dim == 0 {
            return Err(Error::ModelFormat("input dimension is zero".into()));
        }
        let mut model = skeleton(input_dim, config)?;
        let names: Vec<String> = model
            .parameter_names()
            .into_iter()
            .chain(["bn.running_mean".to_string(), "bn.running_var".to_string()])
            .collect();
        let mut slots = model.parameters_mut();
        let mut running = Vec::new();
        let (rm, rv) = (Tensor::zeros(1, embed_dim), Tensor::zeros(1, embed_dim));
        running.push(rm);
        running.push(rv);
        for (i, name) in names.iter().enumerate() {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let target: &mut Tensor = if i < slots.len() {
                &mut *slots[i]
            } else {
                &mut running[i - slots.len()]
            };
            if (rows, cols) != target.shape() {
                return Err(Error::ModelShape {
                    param: name.clone(),
                    expected: target.shape(),
                    found: (rows, cols),
                });
            }
            for v in target.data_mut() {
                *v = r.f64()?;
            }
        }
        drop(slots);
        if r.pos != r.buf.len() {
            return Err(Error::ModelFormat(format!(
                "{} unread bytes after the parameters",
                r.buf.len() - r.pos
            )));
        }
        model.bn.running_var = running.pop().expect("running var");
        model.bn.running_mean = running.pop().expect("running mean");
        let all_finite = model
            .parameters()
            .into_iter()
            .chain([&model.bn.running_mean, &model.bn.running_var])
            .all(Tensor::is_finite);
        if !all_finite {
            return Err(Error::ModelFormat("non-finite parameter values".into()));
        }
        Ok(model)
    }
}

const MAGIC: [u8; 4] = *b"POE1";
const FORMAT_VERSION: u32 = 1;

fn decode_code(d: DecodeStrategy) -> u8 {
    match d {
        DecodeStrategy::Argmax => 0,
        DecodeStrategy::Expectation => 1,
    }
}

fn decode_from_code(c: u8) -> Option<DecodeStrategy> {
    match c {
        0 => Some(DecodeStrategy::Argmax),
        1 => Some(DecodeStrategy::Expectation),
        _ => None,
    }
}

/// A model with correctly shaped, zeroed parameters.
fn skeleton(input_dim: usize, config: TrainConfig) -> Result<PoeModel> {
    let mut width = input_dim;
    let mut hidden = Vec::new();
    for &h in &config.hidden {
        hidden.push(Linear {
            weight: Tensor::zeros(width, h),
            bias: Tensor::zeros(1, h),
        });
        width = h;
    }
    let d = config.embed_dim;
    let zero = |i, o| Linear {
        weight: Tensor::zeros(i, o),
        bias: Tensor::zeros(1, o),
    };
    Ok(PoeModel {
        input_dim,
        hidden,
        mu_head: zero(width, d),
        sigma_head: zero(width, d),
        bn: BatchNorm::new(d),
        head: HeadParams::zeros(config.head, d, config.classes)?,
        config,
    })
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let bb = tape.broadcast(b, tape.shape(xw))?;
    tape.add(xw, bb)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("size fits in u32");
        self.0.extend(v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::ModelFormat("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Adam {
            learning_rate,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub loss: LossValues,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochSummary>,
    pub total_steps: usize,
    pub train_mae: Option<f64>,
    pub train_accuracy: Option<f64>,
}

/// Contiguous batches of a shuffled order; a trailing batch of fewer than
/// 3 examples is dropped unless it is the only one.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 3) {
        out.pop();
    }
    out
}

/// One optimiser step on a batch; returns the loss values before the update.
pub fn train_step(
    model: &mut PoeModel,
    adam: &mut Adam,
    batch: &[SampleRecord],
    sampling: &mut RunRng,
) -> Result<LossValues> {
    let eps = model.draw_noise(batch.len(), sampling);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let terms = model.total_loss(&mut tape, &p, batch, eps.as_ref())?;
    let values = terms.values(&tape);
    if !values.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} (head {}, ordinal {}, vib {})",
            values.total, values.head, values.ordinal, values.vib
        )));
    }
    tape.backward(terms.total)?;
    let mut vars = Vec::with_capacity(p.hidden.len() * 2 + 7);
    for &(w, b) in &p.hidden {
        vars.push(w);
        vars.push(b);
    }
    vars.extend([
        p.mu.0,
        p.mu.1,
        p.sigma.0,
        p.sigma.1,
        p.gamma,
        p.beta,
        p.head.weights,
    ]);
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} is not finite",
            model.parameter_names()[i]
        )));
    }
    adam.update(&mut model.parameters_mut(), &grads);
    if let Some(i) = model.parameters().iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "parameter {} is not finite after the update",
            model.parameter_names()[i]
        )));
    }
    if let Some(stats) = &terms.stats {
        model.bn.update(stats);
    }
    Ok(values)
}

/// Trains for `config.epochs` passes over shuffled minibatches.
pub fn train(model: &mut PoeModel, data: &Dataset) -> Result<TrainingReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty dataset".into(),
        ));
    }
    if data.feature_dim() != model.input_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.feature_dim(),
            model.input_dim
        )));
    }
    let seed = model.config.seed;
    let mut shuffle = stream(seed, Stream::Shuffle);
    let mut sampling = stream(seed, Stream::Sampling);
    let mut adam = Adam::new(model.config.learning_rate, &model.parameters());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(model.config.epochs);
    let mut step = 0;
    let mut batch = Vec::with_capacity(model.config.batch_size);
    for epoch in 0..model.config.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = LossValues::default();
        let mut count = 0;
        for idx in batches(&order, model.config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data.records[i].clone()));
            let v = train_step(model, &mut adam, &batch, &mut sampling).map_err(|e| {
                Error::Divergence {
                    step,
                    epoch,
                    detail: e.to_string(),
                }
            })?;
            sum.total += v.total;
            sum.head += v.head;
            sum.ordinal += v.ordinal;
            sum.vib += v.vib;
            count += 1;
            step += 1;
        }
        let n = count.max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            loss: LossValues {
                total: sum.total / n,
                head: sum.head / n,
                ordinal: sum.ordinal / n,
                vib: sum.vib / n,
            },
            steps: count,
        });
    }
    let preds = model.predict(&data.records)?;
    let (mut abs_err, mut hits) = (0.0, 0usize);
    for (p, r) in preds.iter().zip(&data.records) {
        abs_err += (p.decoded.estimate - r.target).abs();
        hits += usize::from(p.decoded.class == r.class_index);
    }
    let n = data.len() as f64;
    Ok(TrainingReport {
        epochs,
        total_steps: step,
        train_mae: Some(abs_err / n),
        train_accuracy: Some(hits as f64 / n),
    })
}
