//! Central finite differences for checking reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values; it never touches
//! the adjoint rules it is checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Magnitude below which gradient components are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `max |a − b| / max(|a|, |b|, REL_FLOOR)` over paired components.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Numerical gradient of the scalar `f` with respect to every input element.
pub fn finite_difference<F>(inputs: &[Tensor], f: F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + step;
            let fp = eval(&work, &f)?;
            work[i].data_mut()[k] = x0 - step;
            let fm = eval(&work, &f)?;
            work[i].data_mut()[k] = x0;
            *gk = (fp - fm) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[i].shape(), g)?);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` against central differences,
/// returning the worst relative error over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let numeric = finite_difference(inputs, &f, FD_STEP)?;
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(n.shape()));
        worst = worst.max(max_relative_error(analytic.data(), n.data()));
    }
    Ok(worst)
}
