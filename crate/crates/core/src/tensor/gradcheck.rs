//! Central finite-difference gradient checking in 64-bit.
//!
//! The error reported for an input is `max |analytic - numeric|` divided by
//! the larger of the two gradients' max-norms, so it is scale free and
//! insensitive to individual near-zero entries.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input tensor.
    pub errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compare the tape's gradients of the scalar built by `f` against central
/// differences with step `eps`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for t in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[t].numel());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work, &f)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work, &f)?;
            work[t].data_mut()[i] = orig;
            col.push((plus - minus) / (2.0 * eps));
        }
        numeric.push(col);
    }

    let errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a
                .iter()
                .zip(n)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let scale = a
                .iter()
                .chain(n)
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            if scale < 1e-12 {
                diff
            } else {
                diff / scale
            }
        })
        .collect();
    Ok(GradCheckReport {
        errors,
        analytic,
        numeric,
    })
}
