//! Central finite-difference gradient checking.
//!
//! The check is oracle-style: it never inspects how the analytic gradient
//! was produced, it only re-evaluates the loss at perturbed parameters.
//! Losses with stochastic parts must re-derive their RNG inside the closure
//! so every evaluation sees identical draws; losses with detached terms
//! (e.g. advantage weights) must be evaluated with those terms frozen.

use crate::nn::{Gradient, MlpParams};

/// Worst-case errors found over all parameters of one network.
#[derive(Debug, Clone, Copy)]
pub struct FdOutcome {
    pub n_checked: usize,
    /// Max relative error over parameters where max(|analytic|, |fd|) ≥ 1e-7.
    pub max_rel_err: f64,
    /// Max absolute error over the remaining (near-zero) parameters.
    pub max_small_abs_err: f64,
}

impl FdOutcome {
    pub fn within(&self, rel_tol: f64, small_abs_tol: f64) -> bool {
        self.max_rel_err < rel_tol && self.max_small_abs_err < small_abs_tol
    }
}

/// Compares `analytic` to central finite differences of `loss_at`, which
/// receives a full copy of the network with exactly one parameter nudged.
pub fn check_gradient<F>(
    params: &MlpParams,
    analytic: &Gradient,
    step: f64,
    mut loss_at: F,
) -> FdOutcome
where
    F: FnMut(&MlpParams) -> f64,
{
    let theta0 = params.param_vector();
    let grads = analytic.to_vector();
    assert_eq!(theta0.len(), grads.len(), "gradient/parameter shape mismatch");
    let mut work = params.clone();
    let mut out = FdOutcome {
        n_checked: theta0.len(),
        max_rel_err: 0.0,
        max_small_abs_err: 0.0,
    };
    let mut theta = theta0.clone();
    for i in 0..theta0.len() {
        theta[i] = theta0[i] + step;
        work.set_param_vector(&theta);
        let up = loss_at(&work);
        theta[i] = theta0[i] - step;
        work.set_param_vector(&theta);
        let down = loss_at(&work);
        theta[i] = theta0[i];
        let fd = (up - down) / (2.0 * step);
        let a = grads[i];
        let denom = a.abs().max(fd.abs());
        if denom < 1e-7 {
            out.max_small_abs_err = out.max_small_abs_err.max((a - fd).abs());
        } else {
            out.max_rel_err = out.max_rel_err.max((a - fd).abs() / denom);
        }
    }
    out
}
