//! Central finite differences against the tape's gradients, in `f64`.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Relative disagreement used by every gradient check.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between autodiff and central differences of a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps)
}

/// Same as [`grad_check`] over several input tensors; every coordinate of
/// every input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| {
                v.grad()
                    .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
            })
            .collect()
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
