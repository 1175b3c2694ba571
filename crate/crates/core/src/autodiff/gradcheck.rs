//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative discrepancy.
    pub tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// numerically zero are compared in absolute terms.
    pub abs_floor: f64,
    /// Rounding allowance in ulps of the loss: central differences cannot
    /// resolve gradients below `roundoff_ulps · eps · |f| / step`, so
    /// discrepancies under that level count as agreement.
    pub roundoff_ulps: f64,
    /// Check at most this many coordinates per parameter (sampled with
    /// `seed`); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            roundoff_ulps: 16.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates that sit on a kink (one-sided slopes disagree) and were
    /// excluded from the comparison.
    pub kinks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kink_count(&self) -> usize {
        self.params.iter().map(|p| p.kinks.len()).sum()
    }
}

fn eval<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Compares autodiff gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic: any sampling noise has to be drawn once
/// outside and captured. A coordinate whose central difference disagrees
/// is re-examined with one-sided differences at `step` and `step / 10`; if
/// the gap between the left and right slopes does not shrink with the step
/// the point is a kink and is excluded instead of failing.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let f0 = tape.value(root).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("loss at the base point is {f0}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < param.len() => {
                let mut v = sample(&mut rng, param.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..param.len()).collect(),
        };
        let mut report = ParamReport {
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
            kinks: Vec::new(),
        };
        for &ci in &coords {
            let base = param.data()[ci];
            let at = |offset: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[pi].data_mut()[ci] = base + offset;
                let f = eval(&loss_fn, work);
                work[pi].data_mut()[ci] = base;
                let f = f?;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss is {f} with parameter {pi} coordinate {ci} offset by {offset:e}"
                    )));
                }
                Ok(f)
            };
            let h = opts.step;
            let plus = at(h, &mut work)?;
            let minus = at(-h, &mut work)?;
            let numeric = (plus - minus) / (2.0 * h);
            let auto = analytic[pi].data()[ci];
            let noise =
                opts.roundoff_ulps * f64::EPSILON * plus.abs().max(minus.abs()).max(f0.abs()) / h;
            let rel = (auto - numeric).abs()
                / auto
                    .abs()
                    .max(numeric.abs())
                    .max(opts.abs_floor)
                    .max(noise / opts.tol);
            if rel > opts.tol {
                let gap = ((plus - f0) / h - (f0 - minus) / h).abs();
                let hs = h / 10.0;
                let plus_s = at(hs, &mut work)?;
                let minus_s = at(-hs, &mut work)?;
                let gap_s = ((plus_s - f0) / hs - (f0 - minus_s) / hs).abs();
                if gap_s > 0.5 * gap && gap_s > (auto - numeric).abs() {
                    report.kinks.push(ci);
                    continue;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = ci;
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error <= opts.tol);
    Ok(GradCheckReport {
        params: reports,
        tol: opts.tol,
        passed,
    })
}
