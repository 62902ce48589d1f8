//! Gradient estimators for the generative model and the warm-start model.
//!
//! Every function here returns the gradient of a *loss* to be descended:
//! the negative chain-averaged log joint for θ, and the divergence
//! surrogates for φ. Chain samples always enter as constants.

use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{kl_to_prior_graph, GenerativeModel, WarmStartModel};

/// Running sum of parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    pub sum: ParamSet,
    pub count: usize,
}

impl GradAccumulator {
    pub fn new(like: &ParamSet) -> Self {
        GradAccumulator {
            sum: like.zeros_like(),
            count: 0,
        }
    }

    pub fn add(&mut self, grad: &ParamSet) -> Result<()> {
        self.sum.add_scaled(grad, 1.0)?;
        self.count += 1;
        Ok(())
    }

    /// `sum / count` (zeros when nothing was added).
    pub fn mean(&self) -> ParamSet {
        let mut out = self.sum.clone();
        if self.count > 0 {
            out.scale(1.0 / self.count as f64);
        }
        out
    }
}

/// Adds `∇θ Σ_b log p(x_b, z_b | θ)` for one chain state to `acc`; returns the summed log joint.
pub fn accumulate_theta_grad(
    acc: &mut GradAccumulator,
    model: &GenerativeModel,
    x: &Tensor,
    z: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let zv = g.constant(z.clone());
    let lp = model.log_joint_graph(&mut g, &pv, xv, zv)?;
    let total = g.sum(lp)?;
    g.backward(total)?;
    acc.add(&model.params.grads_from(&g, &pv))?;
    Ok(g.value(total).data()[0])
}

/// Cross-entropy of the warm-start model under chain samples:
/// loss `−(1/T) Σ_t Σ_b log q(z_b⁽ᵗ⁾ | x_b, φ)` and its φ-gradient.
pub fn forward_kl_grad(
    q: &WarmStartModel,
    x: &Tensor,
    samples: &[Tensor],
) -> Result<(f64, ParamSet)> {
    if samples.is_empty() {
        return Err(Error::invalid("forward KL needs at least one sample"));
    }
    let mut g = Graph::new();
    let pv = q.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let (mean, scale) = q.encode_graph(&mut g, &pv, xv)?;
    let mut total = None;
    for z in samples {
        if z.shape() != g.shape(mean) {
            return Err(Error::ShapeMismatch {
                op: "forward_kl_grad",
                lhs: z.shape().to_vec(),
                rhs: g.shape(mean).to_vec(),
            });
        }
        let zv = g.constant(z.clone());
        let lp = g.gaussian_log_density(zv, mean, scale)?;
        let s = g.sum(lp)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let loss = g.scale(total.unwrap(), -1.0 / samples.len() as f64)?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], q.params.grads_from(&g, &pv)))
}

/// Reparameterized negative ELBO `Σ_b [−log p(x_b | z_b) + KL(q_b ‖ p(z))]`
/// with `z = μ + σ ⊙ ε`, returning `(loss, ∇θ, ∇φ)`.
pub fn reparam_elbo_grads(
    p: &GenerativeModel,
    q: &WarmStartModel,
    x: &Tensor,
    eps: &Tensor,
) -> Result<(f64, ParamSet, ParamSet)> {
    let mut g = Graph::new();
    let theta = p.params.bind(&mut g, true);
    let phi = q.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let ev = g.constant(eps.clone());
    let (mean, scale) = q.encode_graph(&mut g, &phi, xv)?;
    let z = q.reparam_from(&mut g, mean, scale, ev)?;
    let lik = p.log_likelihood_graph(&mut g, &theta, xv, z)?;
    let kl = kl_to_prior_graph(&mut g, mean, scale, p.prior_variance())?;
    let per = g.sub(kl, lik)?;
    let loss = g.sum(per)?;
    g.backward(loss)?;
    Ok((
        g.value(loss).data()[0],
        p.params.grads_from(&g, &theta),
        q.params.grads_from(&g, &phi),
    ))
}

/// φ-gradient of the reverse KL through the reparameterized ELBO
/// (the θ-gradient of the same expression is discarded).
pub fn reverse_kl_grad(
    p: &GenerativeModel,
    q: &WarmStartModel,
    x: &Tensor,
    eps: &Tensor,
) -> Result<(f64, ParamSet)> {
    let (loss, _, phi) = reparam_elbo_grads(p, q, x, eps)?;
    Ok((loss, phi))
}

/// Half the symmetrised KL: `½ (g_F + g_R)`.
pub fn jeffreys_grad(forward: &ParamSet, reverse: &ParamSet) -> Result<ParamSet> {
    let mut out = forward.clone();
    out.add_scaled(reverse, 1.0)?;
    out.scale(0.5);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jeffreys_of_opposites_is_zero() {
        let mut f = ParamSet::new();
        f.insert("w", Tensor::vector(vec![1.0, -2.0, 0.25])).unwrap();
        let mut r = f.clone();
        r.scale(-1.0);
        let j = jeffreys_grad(&f, &r).unwrap();
        assert!(j.flatten().iter().all(|&v| v == 0.0));
        let j = jeffreys_grad(&f, &f.zeros_like()).unwrap();
        assert_eq!(j.flatten(), vec![0.5, -1.0, 0.125]);
    }

    #[test]
    fn jeffreys_rejects_layout_mismatch() {
        let mut f = ParamSet::new();
        f.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut r = ParamSet::new();
        r.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(jeffreys_grad(&f, &r).is_err());
    }

    #[test]
    fn empty_accumulator_mean_is_zero() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![3.0])).unwrap();
        let acc = GradAccumulator::new(&p);
        assert_eq!(acc.mean().flatten(), vec![0.0]);
    }
}
