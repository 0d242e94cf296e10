//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Builds a scalar loss from leaf tensors registered in the order given.
pub trait LossBuilder: Fn(&mut Graph, &[Tensor]) -> Result<Tensor> {}
impl<F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>> LossBuilder for F {}

fn forward(build: &impl LossBuilder, inputs: &[Matrix]) -> Result<f64> {
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &leaves)?;
    if loss.shape() != (1, 1) {
        return Err(Error::Contract("loss builder must return a 1x1 tensor".into()));
    }
    Ok(g.value(loss).get(0, 0))
}

/// Gradients of the loss w.r.t. every input, via the tape.
pub fn analytic_grads(build: &impl LossBuilder, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &leaves)?;
    g.backward(loss)?;
    Ok(leaves.iter().map(|&t| g.grad(t)).collect())
}

/// Gradients of the loss w.r.t. every input, via `(L(x+h) - L(x-h)) / 2h`.
pub fn numerical_grads(
    build: &impl LossBuilder,
    inputs: &[Matrix],
    h: f64,
) -> Result<Vec<Matrix>> {
    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].as_slice()[j];
            work[i].as_mut_slice()[j] = orig + h;
            let plus = forward(build, &work)?;
            work[i].as_mut_slice()[j] = orig - h;
            let minus = forward(build, &work)?;
            work[i].as_mut_slice()[j] = orig;
            grad.as_mut_slice()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Entry relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Worst entry relative error across all gradient matrices.
pub fn max_rel_error(analytic: &[Matrix], numerical: &[Matrix]) -> f64 {
    analytic
        .iter()
        .zip(numerical)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
