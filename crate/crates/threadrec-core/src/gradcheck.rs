//! Central finite-difference gradient verification.
//!
//! Used by the test suites to validate every backward rule against an
//! independent numerical estimate, and available to downstream code for
//! debugging new loss constructions.

use crate::params::{ParamBank, ParamId};
use crate::scalar::Scalar;

/// Default perturbation for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, so near-zero gradients compare on
/// the FD noise floor instead of dividing by ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central finite differences of `loss` w.r.t. every entry of `pid`.
///
/// `loss` must be a pure function of the bank contents. The parameter is
/// perturbed in place and restored afterwards.
pub fn fd_param_grad<T, F>(bank: &mut ParamBank<T>, pid: ParamId, step: f64, mut loss: F) -> Vec<f64>
where
    T: Scalar,
    F: FnMut(&ParamBank<T>) -> f64,
{
    let n = bank.value(pid).numel();
    let h = T::of(step);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = bank.value(pid).data()[i];
        bank.value_mut(pid).data_mut()[i] = orig + h;
        let up = loss(bank);
        bank.value_mut(pid).data_mut()[i] = orig - h;
        let down = loss(bank);
        bank.value_mut(pid).data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Max relative error between analytic gradients and central differences over
/// every parameter in the bank.
pub fn max_relative_error<T, F, G>(
    bank: &mut ParamBank<T>,
    step: f64,
    mut loss: F,
    analytic: G,
) -> f64
where
    T: Scalar,
    F: FnMut(&ParamBank<T>) -> f64,
    G: Fn(ParamId, usize) -> f64,
{
    let mut worst = 0.0f64;
    let ids: Vec<ParamId> = bank.ids().collect();
    for pid in ids {
        let fd = fd_param_grad(bank, pid, step, &mut loss);
        for (i, numeric) in fd.into_iter().enumerate() {
            let err = relative_error(analytic(pid, i), numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
