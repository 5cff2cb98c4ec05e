//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it is used to audit.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `||a - b|| / max(||a|| + ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-10)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Central differences of the scalar `f` with respect to every input element.
pub fn numeric_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work, &f)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work, &f)?;
            work[i].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Gradients of the scalar `f` from one backward pass.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect())
}

/// Relative error between analytic and numeric gradients, one entry per input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, h, &f)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect())
}
