//! Central-difference verification of analytic gradients.
//!
//! The analytic side runs in the caller's precision. The numeric side always
//! re-evaluates the same function in `f64`, so single-precision kernels are
//! compared against a reference whose rounding error is far below the
//! tolerance being checked.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// A scalar function of graph leaves, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Additional lower bound on the denominator as a fraction of the
    /// largest numeric gradient of the same parameter tensor, so elements
    /// that vanish by cancellation are judged against the tensor's scale.
    pub scale_floor: f64,
    /// Check at most this many evenly spaced elements per parameter; 0 means all.
    pub max_per_param: usize,
    pub stencil: Stencil,
    /// Skip elements whose estimates at `step` and `step / 2` disagree by
    /// more than this relative amount: the stencil then straddles a kink such
    /// as a ReLU corner.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-6,
            scale_floor: 0.0,
            max_per_param: 0,
            stencil: Stencil::ThreePoint,
            kink_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
    /// Elements left out because the stencil straddled a kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_indices(n: usize, limit: usize) -> Vec<usize> {
    if limit == 0 || limit >= n {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}

fn eval_f64<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::no_grad();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// over all checked parameter elements, where `floor` is the larger of
/// [`GradCheckOptions::floor`] and the scale floor of the element's tensor.
pub fn finite_diff_check<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &[Tensor<T>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;

    let mut wide: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let mut numerics = Vec::new();
        for ei in sample_indices(params[pi].numel(), opts.max_per_param) {
            let orig = wide[pi].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                wide[pi].data_mut()[ei] = orig + offset;
                let v = eval_f64(f, &wide);
                wide[pi].data_mut()[ei] = orig;
                v
            };
            let h = opts.step;
            let mut estimate = |h: f64| -> Result<f64> {
                let inner = at(h)? - at(-h)?;
                Ok(match opts.stencil {
                    Stencil::ThreePoint => inner / (2.0 * h),
                    Stencil::FivePoint => (8.0 * inner - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
                })
            };
            let numeric = estimate(h)?;
            let half = match opts.kink_tolerance {
                Some(_) => estimate(h / 2.0)?,
                None => numeric,
            };
            numerics.push((ei, numeric, half));
        }
        let scale = numerics.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
        let floor = opts.floor.max(opts.scale_floor * scale);
        for (ei, numeric, half) in numerics {
            if opts.kink_tolerance.is_some_and(|tol| relative_error(numeric, half, floor) > tol) {
                report.skipped += 1;
                continue;
            }
            let err = relative_error(analytic[ei], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: pi,
                    element: ei,
                    analytic: analytic[ei],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
