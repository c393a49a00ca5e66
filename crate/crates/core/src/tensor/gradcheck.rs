//! Central-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Evaluates `f` on a fresh tape with `params` bound as a parameter leaf.
fn evaluate<F>(f: &F, params: &Tensor) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let out = f(&mut tape, p)?;
    tape.check_finite()?;
    if tape.value(out).numel() != 1 {
        contract!("grad_check target is not scalar: {:?}", tape.value(out).shape());
    }
    Ok((tape, p, out))
}

/// Analytic gradient of scalar `f` at `params` via the tape.
pub fn analytic_gradient<F>(f: &F, params: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (tape, p, out) = evaluate(f, params)?;
    let grads = tape.backward(out)?;
    Ok(grads
        .get(p)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; params.numel()]))
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn numerical_gradient<F>(f: &F, params: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        contract!("finite-difference step must be positive, got {step}");
    }
    let mut data = params.data().to_vec();
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let plus = eval_scalar(f, params.shape(), &data)?;
        data[i] = orig - step;
        let minus = eval_scalar(f, params.shape(), &data)?;
        data[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn eval_scalar<F>(f: &F, shape: &[usize], data: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let t = Tensor::new(shape.to_vec(), data.to_vec())?;
    let (tape, _, out) = evaluate(f, &t)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<GradCheck> {
    if analytic.len() != numeric.len() || analytic.is_empty() {
        contract!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            numeric.len()
        );
    }
    let mut best = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        if err > best.max_rel_error {
            best = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(best)
}

/// Maximum relative error between the tape gradient of `f` and central
/// differences with the given `step`.
pub fn grad_check<F>(f: F, params: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, params)?;
    let numeric = numerical_gradient(&f, params, step)?;
    compare_gradients(&analytic, &numeric)
}
