//! Central finite-difference gradient verification.
//!
//! The verifier is the independent oracle for every analytic gradient in the
//! crate: it never touches the tape's backward pass, only repeated forward
//! evaluations of the loss closure.

use super::ParamSet;
use crate::error::{Error, Result};

/// Checks the analytic gradients produced by `loss_fn` against central
/// finite differences with step `eps`.
///
/// `loss_fn` must be a pure function of the parameter values that returns
/// the scalar loss and leaves the analytic gradients accumulated in the
/// set (the usual tape-backward-accumulate sequence). It is re-evaluated
/// at perturbed parameters for the numeric side.
///
/// Returns the maximum over all trainable coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &mut ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut ParamSet) -> Result<f64>,
{
    assert!(eps > 0.0, "finite_diff_check: eps must be positive");

    params.zero_grads();
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check".into(),
            detail: format!("loss evaluated to {base}"),
        });
    }
    let analytic: Vec<crate::nn::Mat> = params
        .ids()
        .map(|id| params.grad(id).clone())
        .collect();

    let mut max_rel = 0.0_f64;
    for id in params.ids().collect::<Vec<_>>() {
        if !params.is_trainable(id) {
            continue;
        }
        let (rows, cols) = {
            let v = params.value(id);
            (v.nrows(), v.ncols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = params.value(id)[[r, c]];

                params.value_mut(id)[[r, c]] = orig + eps;
                params.zero_grads();
                let plus = loss_fn(params)?;

                params.value_mut(id)[[r, c]] = orig - eps;
                params.zero_grads();
                let minus = loss_fn(params)?;

                params.value_mut(id)[[r, c]] = orig;

                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        context: "finite_diff_check".into(),
                        detail: format!("perturbed loss not finite at {}[{r},{c}]", params.name(id)),
                    });
                }
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[id.0][[r, c]];
                let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    params.zero_grads();
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{Bound, Tape};
    use crate::nn::ParamSet;
    use ndarray::array;

    #[test]
    fn exact_for_quadratic() {
        // loss = w . w  => grad = 2w; both sides agree to rounding.
        let mut params = ParamSet::new();
        let id = params.add("w", array![[0.3, -1.7, 2.2]]);
        let err = finite_diff_check(
            |p| {
                let mut tape = Tape::new();
                let mut bound = Bound::new();
                let w = bound.bind(&mut tape, p, id);
                let d = tape.row_dot(w, w);
                let loss = tape.sum_all(d);
                tape.backward(loss);
                bound.accumulate(&tape, p);
                Ok(tape.value(loss)[[0, 0]])
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_loss_both_sides_zero() {
        let mut params = ParamSet::new();
        params.add("w", array![[1.0, 2.0]]);
        let err = finite_diff_check(|_| Ok(4.5), &mut params, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::new();
        params.add("w", array![[1.0]]);
        assert!(finite_diff_check(|_| Ok(f64::NAN), &mut params, 1e-4).is_err());
    }
}
