//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Graphs are rebuilt on every evaluation. Build the forward pass with the
//! primitive methods on [`Graph`], then call [`Graph::backward`] on a scalar
//! node; [`value_and_grad`] and [`value_and_grad_params`] wrap that pattern.

mod graph;
mod params;
pub mod special;
mod tensor;

pub use graph::{
    discretized_log_mass, primitives, Graph, Var, MASS_FLOOR, PIXEL_HALF_BIN, PRIMITIVES,
};
pub use params::{ParamSet, ParamVars};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates a scalar function and its gradient with respect to each input.
/// Inputs are copied into the graph; the caller's tensors are untouched.
pub fn value_and_grad<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    g.backward(out)?;
    Ok((value, vars.iter().map(|&v| g.grad_or_zero(v)).collect()))
}

/// [`value_and_grad`] over a named parameter set.
pub fn value_and_grad_params<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    g.backward(out)?;
    Ok((value, params.grads_from(&g, &vars)))
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalar {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.data()[0])
}
