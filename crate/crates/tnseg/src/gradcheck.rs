//! Finite-difference verification of tape gradients.
//!
//! `grad_check` compares the reverse-mode gradient of a scalar function
//! against central differences, coordinate by coordinate, and reports the
//! worst relative error. Test tensors should stay tiny: the numeric side
//! costs two forward passes per coordinate.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar function of a parameter list, expressed as a tape program.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Reverse-mode gradients of `f` at `params`, one tensor per parameter.
/// Parameters disconnected from the loss get zero gradients.
pub fn analytic_gradients(f: &dyn ScalarFn, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f.eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

/// Central-difference gradients of `f` at `params` with step `h`.
pub fn numeric_gradients(f: &dyn ScalarFn, params: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let eval_at = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f.eval(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for i in 0..params[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = eval_at(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let down = eval_at(&work)?;
            work[pi].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative discrepancy between two gradient sets:
/// `|a - n| / max(1, |a|, |n|)` over all coordinates.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = 1.0_f64.max(av.abs()).max(nv.abs());
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Max relative error between reverse-mode and central-difference gradients.
pub fn grad_check(f: &dyn ScalarFn, params: &[Tensor], h: f64) -> Result<f64> {
    let analytic = analytic_gradients(f, params)?;
    let numeric = numeric_gradients(f, params, h)?;
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape, params: &[Var]) -> Result<Var> {
        let sq = tape.mul(params[0], params[0])?;
        tape.sum_all(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::from_vec(vec![3.0]);
        let err = grad_check(&quadratic, &[w.clone()], DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "relative error {err}");
        let g = analytic_gradients(&quadratic, &[w]).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |tape: &mut Tape, _params: &[Var]| -> Result<Var> {
            Ok(tape.scalar(7.0))
        };
        let w = Tensor::from_vec(vec![1.0, 2.0]);
        let analytic = analytic_gradients(&f, &[w.clone()]).unwrap();
        let numeric = numeric_gradients(&f, &[w.clone()], DEFAULT_STEP).unwrap();
        assert_eq!(analytic[0].data(), &[0.0, 0.0]);
        assert_eq!(numeric[0].data(), &[0.0, 0.0]);
        assert_eq!(relative_error(&analytic, &numeric), 0.0);
        assert!(grad_check(&f, &[w], DEFAULT_STEP).unwrap() == 0.0);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let w = Tensor::from_vec(vec![3.0, -1.5]);
        let mut analytic = analytic_gradients(&quadratic, &[w.clone()]).unwrap();
        let numeric = numeric_gradients(&quadratic, &[w], DEFAULT_STEP).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-8);
        // A sign flip in one backward rule must not go unnoticed.
        analytic[0].data_mut()[1] = -analytic[0].data()[1];
        assert!(relative_error(&analytic, &numeric) > 0.1);
    }
}
