//! Diagonal-Gaussian embeddings: reparameterised sampling, closed-form
//! divergences, the information-bottleneck KL term and the per-example
//! uncertainty score.
//!
//! Each quantity exists twice: a plain-value function over
//! [`DiagonalGaussian`] and a batched tape function over `N x D` mean and
//! standard-deviation nodes that returns an `N x 1` column. The tape
//! versions are what the training losses use; the plain versions back
//! evaluation and serve as a cross-check.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};

/// Variances are floored at this value inside the divergence ratio terms.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Dimension(format!(
                "mean has {} dimensions, sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "sigma components must be finite and > 0, got {s}"
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean contains a non-finite value".into()));
        }
        Ok(DiagonalGaussian { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// One reparameterised draw `z = mu + sigma * epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSample {
    pub z: Vec<f64>,
    pub epsilon: Vec<f64>,
}

pub fn reparameterize(g: &DiagonalGaussian, epsilon: Vec<f64>) -> Result<EmbeddingSample> {
    if epsilon.len() != g.dim() {
        return Err(Error::Dimension(format!(
            "epsilon has {} dimensions, embedding has {}",
            epsilon.len(),
            g.dim()
        )));
    }
    let z =
        g.mu.iter()
            .zip(&g.sigma)
            .zip(&epsilon)
            .map(|((m, s), e)| m + s * e)
            .collect();
    Ok(EmbeddingSample { z, epsilon })
}

/// Draws `count` samples with `epsilon ~ N(0, I)`.
pub fn sample<R: Rng + ?Sized>(
    g: &DiagonalGaussian,
    count: usize,
    rng: &mut R,
) -> Result<Vec<EmbeddingSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    (0..count)
        .map(|_| {
            let eps = (0..g.dim()).map(|_| rng.sample(StandardNormal)).collect();
            reparameterize(g, eps)
        })
        .collect()
}

fn check_dims(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "gaussians have {} and {} dimensions",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Symmetrised KL divergence `KL(a||b) + KL(b||a)`.
pub fn skl(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    check_dims(a, b)?;
    let mut total = 0.0;
    for j in 0..a.dim() {
        let va = (a.sigma[j] * a.sigma[j]).max(VARIANCE_FLOOR);
        let vb = (b.sigma[j] * b.sigma[j]).max(VARIANCE_FLOOR);
        let d2 = (a.mu[j] - b.mu[j]).powi(2);
        // Each pair is commutative, so swapping a and b is bit-exact.
        total += (va / vb + vb / va) - 2.0 + (d2 / va + d2 / vb);
    }
    Ok(0.5 * total)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_squared(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    check_dims(a, b)?;
    Ok((0..a.dim())
        .map(|j| (a.mu[j] - b.mu[j]).powi(2) + (a.sigma[j] - b.sigma[j]).powi(2))
        .sum())
}

/// `KL(g || N(0, I))`.
pub fn vib_kl(g: &DiagonalGaussian) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.sigma)
        .map(|(m, s)| {
            let v = s * s;
            m * m + v - v.ln() - 1.0
        })
        .sum::<f64>()
}

/// Harmonic mean of the per-dimension standard deviations.
pub fn uncertainty_score(g: &DiagonalGaussian) -> f64 {
    g.dim() as f64 / g.sigma.iter().map(|s| 1.0 / s).sum::<f64>()
}

// Batched tape versions. `mu*` and `sigma*` are `N x D`; results are `N x 1`.

pub fn reparameterize_var(tape: &mut Tape, mu: Var, sigma: Var, epsilon: Var) -> Result<Var> {
    let noise = tape.mul(sigma, epsilon)?;
    tape.add(mu, noise)
}

pub fn skl_var(tape: &mut Tape, mu_a: Var, sigma_a: Var, mu_b: Var, sigma_b: Var) -> Result<Var> {
    let va = tape.square(sigma_a);
    let va = tape.floor_at(va, VARIANCE_FLOOR)?;
    let vb = tape.square(sigma_b);
    let vb = tape.floor_at(vb, VARIANCE_FLOOR)?;
    let inv_a = tape.recip_positive(va)?;
    let inv_b = tape.recip_positive(vb)?;
    let diff = tape.sub(mu_a, mu_b)?;
    let d2 = tape.square(diff);

    let r_ab = tape.mul(va, inv_b)?;
    let r_ba = tape.mul(vb, inv_a)?;
    let m_a = tape.mul(d2, inv_a)?;
    let m_b = tape.mul(d2, inv_b)?;
    let s = tape.add(r_ab, r_ba)?;
    let s = tape.add(s, m_a)?;
    let s = tape.add(s, m_b)?;
    let s = tape.add_scalar(s, -2.0)?;
    let per_row = tape.sum(s, Some(Axis::Cols));
    Ok(tape.scale(per_row, 0.5))
}

pub fn w2_squared_var(
    tape: &mut Tape,
    mu_a: Var,
    sigma_a: Var,
    mu_b: Var,
    sigma_b: Var,
) -> Result<Var> {
    let dm = tape.sub(mu_a, mu_b)?;
    let ds = tape.sub(sigma_a, sigma_b)?;
    let dm2 = tape.square(dm);
    let ds2 = tape.square(ds);
    let s = tape.add(dm2, ds2)?;
    Ok(tape.sum(s, Some(Axis::Cols)))
}

pub fn vib_kl_var(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let v = tape.square(sigma);
    let log_sigma = tape.log(sigma)?;
    let log_v = tape.scale(log_sigma, 2.0);
    let s = tape.add(m2, v)?;
    let s = tape.sub(s, log_v)?;
    let s = tape.add_scalar(s, -1.0)?;
    let per_row = tape.sum(s, Some(Axis::Cols));
    Ok(tape.scale(per_row, 0.5))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions, Tensor};

    fn g(mu: &[f64], sigma: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    /// Monte-Carlo `KL(p || q)`: mean log-density ratio under draws from p.
    fn mc_kl(p: &DiagonalGaussian, q: &DiagonalGaussian, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let log_pdf = |g: &DiagonalGaussian, z: &[f64]| -> f64 {
            z.iter()
                .zip(g.mu())
                .zip(g.sigma())
                .map(|((z, m), s)| {
                    let u = (z - m) / s;
                    -0.5 * u * u - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum()
        };
        let mut acc = 0.0;
        for _ in 0..n {
            let z: Vec<f64> = p
                .mu()
                .iter()
                .zip(p.sigma())
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            acc += log_pdf(p, &z) - log_pdf(q, &z);
        }
        acc / n as f64
    }

    #[test]
    fn constructor_validates() {
        assert!(DiagonalGaussian::new(vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn zero_noise_collapses_to_mean() {
        let a = g(&[1.0, -2.0], &[0.5, 3.0]);
        let s = reparameterize(&a, vec![0.0, 0.0]).unwrap();
        assert_eq!(s.z, a.mu());
        let tiny = g(&[1.0, -2.0], &[1e-300, 1e-300]);
        let s = reparameterize(&tiny, vec![3.0, -4.0]).unwrap();
        assert_eq!(s.z, tiny.mu());
    }

    #[test]
    fn zero_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample(&DiagonalGaussian::standard(3), 0, &mut rng).is_err());
    }

    #[test]
    fn sample_mean_obeys_law_of_large_numbers() {
        let mu: Vec<f64> = (0..8).map(|j| j as f64 * 0.5 - 2.0).collect();
        let sigma: Vec<f64> = (0..8).map(|j| 0.3 + j as f64 * 0.2).collect();
        let a = g(&mu, &sigma);
        let t = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = sample(&a, t, &mut rng).unwrap();
        for j in 0..8 {
            let mean = draws.iter().map(|s| s.z[j]).sum::<f64>() / t as f64;
            assert!((mean - mu[j]).abs() < 4.0 * sigma[j] / (t as f64).sqrt());
        }
        assert!(draws.iter().all(|s| {
            s.z.iter()
                .zip(&s.epsilon)
                .enumerate()
                .all(|(j, (z, e))| *z == mu[j] + sigma[j] * e)
        }));
    }

    #[test]
    fn skl_examples() {
        let a = g(&[0.3, -1.0], &[0.7, 1.4]);
        assert_eq!(skl(&a, &a).unwrap(), 0.0);
        assert!((skl(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(skl(&a, &DiagonalGaussian::standard(3)).is_err());
    }

    #[test]
    fn skl_matches_monte_carlo_in_one_dimension() {
        let a = g(&[0.0], &[1.0]);
        let b = g(&[1.0], &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mc = mc_kl(&a, &b, 1_000_000, &mut rng) + mc_kl(&b, &a, 1_000_000, &mut rng);
        assert!((mc - 1.0).abs() / 1.0 < 0.02, "mc = {mc}");
    }

    #[test]
    fn w2_examples() {
        let a = g(&[0.3, -1.0], &[0.7, 1.4]);
        assert_eq!(w2_squared(&a, &a).unwrap(), 0.0);
        let p = g(&[0.0, 0.0], &[0.5, 0.5]);
        let q = g(&[3.0, 4.0], &[0.5, 0.5]);
        assert_eq!(w2_squared(&p, &q).unwrap(), 25.0);
        assert_eq!(
            w2_squared(&g(&[0.0], &[1.0]), &g(&[0.0], &[2.0])).unwrap(),
            1.0
        );
    }

    #[test]
    fn vib_examples() {
        assert_eq!(vib_kl(&DiagonalGaussian::standard(5)), 0.0);
        assert!((vib_kl(&g(&[1.0], &[1.0])) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mc = mc_kl(
            &g(&[1.0], &[1.0]),
            &DiagonalGaussian::standard(1),
            1_000_000,
            &mut rng,
        );
        assert!((mc - 0.5).abs() / 0.5 < 0.02, "mc = {mc}");
    }

    #[test]
    fn uncertainty_score_examples() {
        assert!((uncertainty_score(&g(&[0.0; 4], &[0.25; 4])) - 0.25).abs() < 1e-15);
        assert!((uncertainty_score(&g(&[0.0, 0.0], &[1.0, 3.0])) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn tape_versions_match_plain_values() {
        let a = g(&[0.2, -0.4, 1.1], &[0.5, 1.3, 0.9]);
        let b = g(&[-0.6, 0.1, 0.4], &[1.7, 0.4, 1.0]);
        let mut t = Tape::new();
        let ma = t.constant(Tensor::row(a.mu()));
        let sa = t.constant(Tensor::row(a.sigma()));
        let mb = t.constant(Tensor::row(b.mu()));
        let sb = t.constant(Tensor::row(b.sigma()));
        let s = skl_var(&mut t, ma, sa, mb, sb).unwrap();
        let w = w2_squared_var(&mut t, ma, sa, mb, sb).unwrap();
        let v = vib_kl_var(&mut t, ma, sa).unwrap();
        assert!((t.value(s).item() - skl(&a, &b).unwrap()).abs() < 1e-12);
        assert!((t.value(w).item() - w2_squared(&a, &b).unwrap()).abs() < 1e-12);
        assert!((t.value(v).item() - vib_kl(&a)).abs() < 1e-12);
    }

    fn gaussian_pair() -> impl Strategy<Value = (DiagonalGaussian, DiagonalGaussian)> {
        (1usize..=8).prop_flat_map(|d| {
            let vecs = (
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec(0.2f64..2.5, d),
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec(0.2f64..2.5, d),
            );
            vecs.prop_map(|(m1, s1, m2, s2)| (g(&m1, &s1), g(&m2, &s2)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn divergences_are_symmetric_and_non_negative((a, b) in gaussian_pair()) {
            let s_ab = skl(&a, &b).unwrap();
            let w_ab = w2_squared(&a, &b).unwrap();
            prop_assert_eq!(s_ab, skl(&b, &a).unwrap());
            prop_assert_eq!(w_ab, w2_squared(&b, &a).unwrap());
            prop_assert!(s_ab >= 0.0 && w_ab >= 0.0);
            prop_assert_eq!(skl(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(w2_squared(&a, &a).unwrap(), 0.0);
            if a != b {
                prop_assert!(s_ab > 0.0);
                prop_assert!(w_ab > 0.0);
            }
        }

        #[test]
        fn w2_invariant_under_joint_permutation((a, b) in gaussian_pair(), rot in 0usize..8) {
            let d = a.dim();
            let perm = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| x[(j + rot) % d]).collect() };
            let pa = g(&perm(a.mu()), &perm(a.sigma()));
            let pb = g(&perm(b.mu()), &perm(b.sigma()));
            let lhs = w2_squared(&a, &b).unwrap();
            let rhs = w2_squared(&pa, &pb).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
        }

        #[test]
        fn vib_positive_off_standard((a, _b) in gaussian_pair()) {
            if a != DiagonalGaussian::standard(a.dim()) {
                prop_assert!(vib_kl(&a) > 0.0);
            }
        }

        #[test]
        fn harmonic_mean_at_most_arithmetic_mean((a, _b) in gaussian_pair()) {
            let am = a.sigma().iter().sum::<f64>() / a.dim() as f64;
            prop_assert!(uncertainty_score(&a) <= am * (1.0 + 1e-12));
        }

        #[test]
        fn divergence_gradients_match_finite_differences((a, b) in gaussian_pair()) {
            let params = [
                Tensor::row(a.mu()),
                Tensor::row(a.sigma()),
                Tensor::row(b.mu()),
                Tensor::row(b.sigma()),
            ];
            let opts = GradCheckOptions::default();
            let skl_report = grad_check(|t, p| {
                let s = skl_var(t, p[0], p[1], p[2], p[3])?;
                Ok(t.sum(s, None))
            }, &params, &opts).unwrap();
            prop_assert!(skl_report.passed, "{:?}", skl_report);
            let w2_report = grad_check(|t, p| {
                let s = w2_squared_var(t, p[0], p[1], p[2], p[3])?;
                Ok(t.sum(s, None))
            }, &params, &opts).unwrap();
            prop_assert!(w2_report.passed, "{:?}", w2_report);
            let vib_report = grad_check(|t, p| {
                let s = vib_kl_var(t, p[0], p[1])?;
                Ok(t.sum(s, None))
            }, &params[..2], &opts).unwrap();
            prop_assert!(vib_report.passed, "{:?}", vib_report);
        }
    }
}
