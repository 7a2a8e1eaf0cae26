//! Differentiable building blocks with hand-written gradients.
//!
//! Everything is 64-bit. Gradients accumulate into [`ParamGrad::grad`] and are
//! zeroed explicitly by the caller; frozen parameters never accumulate.

mod lstm;
mod ops;
mod tensor;

pub use lstm::{lstm_sequence, lstm_sequence_backward, recurrent_cell_step, LstmParams, LstmState, LstmTrace};
pub use ops::{
    activation, activation_backward, affine, affine_backward, argmax, log_sigmoid, log_softmax,
    log_softmax_in_place, logaddexp, sigmoid, softmax, softmax_in_place, Activation,
};
pub use tensor::{ParamGrad, Tensor2};

pub(crate) use tensor::{add_into, dot, mat_vec_t_acc, outer_acc, vec_mat_acc};

use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central finite differences of `f` around `params`; returns the worst
/// [`relative_error`] against `analytic`.
pub fn finite_difference_check<F>(params: &[f64], analytic: &[f64], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim("finite_difference_check", (params.len(), 1), (analytic.len(), 1)));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work)?;
        work[i] = orig - eps;
        let minus = f(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while perturbing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let err = finite_difference_check(&[3.0], &[6.0], 1e-4, |w| Ok(w[0] * w[0])).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        assert!(finite_difference_check(&[1.0], &[0.0], 0.0, |_| Ok(0.0)).is_err());
        let r = finite_difference_check(&[1.0], &[0.0], 1e-4, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
