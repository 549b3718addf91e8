//! Central finite-difference gradients for checking the tape.
//!
//! Only forward evaluations are used here, so the result is independent of
//! every backward rule on the tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value().item();
    Ok(value)
}

/// Central-difference gradient of `f` with respect to input `which`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, eps: f64) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for idx in 0..inputs[which].numel() {
        let orig = inputs[which].data()[idx];
        work[which].data_mut()[idx] = orig + eps;
        let plus = evaluate(f, &work)?;
        work[which].data_mut()[idx] = orig - eps;
        let minus = evaluate(f, &work)?;
        work[which].data_mut()[idx] = orig;
        grad.data_mut()[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Tape gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Relative error between tape and finite-difference gradients, per input.
pub fn check_gradients<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(f, inputs)?;
    (0..inputs.len())
        .map(|i| Ok(relative_error(&analytic[i], &numeric_gradient(f, inputs, i, eps)?)))
        .collect()
}
