//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    /// Per-input `max|a−n|` over the largest gradient magnitude of any
    /// input, i.e. the normwise relative error of the full gradient split by
    /// input. Inputs whose true gradient is zero stay well defined.
    pub errors: Vec<f64>,
    /// The shared denominator.
    pub scale: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.errors.iter().all(|&e| e <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds a scalar loss from the input leaves.
pub trait LossFn<T>: Fn(&mut Graph<T>, &[Var]) -> Result<Var> {}
impl<T, F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>> LossFn<T> for F {}

fn evaluate<T: Real>(f: &impl LossFn<T>, inputs: &[Tensor<T>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0].f64())
}

/// Gradients of `f` with respect to every input via one backward pass.
pub fn analytic_gradient<T: Real>(f: &impl LossFn<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad(v)).collect())
}

/// Central differences with step `cbrt(eps)·max(1, |x|)`.
pub fn numeric_gradient<T: Real>(f: &impl LossFn<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let base = evaluate(f, inputs)?;
    if evaluate(f, inputs)? != base {
        return Err(Error::contract("grad_check", "loss function is not deterministic"));
    }
    let cbrt_eps = T::epsilon().f64().cbrt();
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape().to_vec());
        for i in 0..inputs[which].numel() {
            let x = inputs[which].data()[i];
            let h = cbrt_eps * x.f64().abs().max(1.0);
            // Round-trip the step through T so the divisor is the step actually taken.
            let (xp, xm) = (x + T::of(h), x - T::of(h));
            work[which].data_mut()[i] = xp;
            let fp = evaluate(f, &work)?;
            work[which].data_mut()[i] = xm;
            let fm = evaluate(f, &work)?;
            work[which].data_mut()[i] = x;
            grad.data_mut()[i] = T::of((fp - fm) / (xp - xm).f64());
        }
        out.push(grad);
    }
    Ok(out)
}

pub fn compare<T: Real>(analytic: &[Tensor<T>], numeric: &[Tensor<T>], tolerance: f64) -> GradReport {
    let scale = analytic.iter().chain(numeric).flat_map(|t| t.data()).map(|v| v.f64().abs()).fold(0.0, f64::max);
    let errors = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = a.max_abs_diff(n);
            if scale == 0.0 {
                diff
            } else {
                diff / scale
            }
        })
        .collect();
    GradReport { tolerance, errors, scale }
}

/// Checks the analytic gradient of `f` against central differences.
pub fn grad_check<T: Real>(f: impl LossFn<T>, inputs: &[Tensor<T>], tolerance: f64) -> Result<GradReport> {
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs)?;
    Ok(compare(&analytic, &numeric, tolerance))
}
