use rand::Rng;

use super::generative::{ModelDims, SCALE_BETA};
use super::mlp::Mlp;
use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::error::{Error, Result};

/// Amortized diagonal-Gaussian posterior `q(z | x, φ)`.
///
/// The encoder emits `2d` values per observation: the first `d` are the
/// mean, the last `d` pass through `softplus(·; β = 0.3)` to give the
/// standard deviation. The output layer is zero-initialized, so a fresh
/// model returns `μ = 0` and `σ = softplus(0; 0.3)` for every input.
#[derive(Clone, Debug)]
pub struct WarmStartModel {
    pub params: ParamSet,
    encoder: Mlp,
    latent_dim: usize,
    obs_dim: usize,
}

impl WarmStartModel {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Result<Self> {
        if dims.latent_dim == 0 || dims.obs_dim == 0 {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        let mut sizes = vec![dims.obs_dim];
        sizes.extend(&dims.hidden);
        sizes.push(2 * dims.latent_dim);
        let encoder = Mlp::new("encoder", sizes);
        let mut params = ParamSet::new();
        encoder.init(&mut params, rng, true)?;
        Ok(WarmStartModel {
            params,
            encoder,
            latent_dim: dims.latent_dim,
            obs_dim: dims.obs_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encode_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.obs_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape.to_vec(),
                rhs: vec![self.obs_dim],
            });
        }
        let out = self.encoder.forward(g, pv, x)?;
        let d = self.latent_dim;
        let mean = g.slice_cols(out, 0, d)?;
        let raw = g.slice_cols(out, d, 2 * d)?;
        let scale = g.softplus(raw, SCALE_BETA)?;
        Ok((mean, scale))
    }

    /// `(μ, σ)`, each `[b, d]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (m, s) = self.encode_graph(&mut g, &pv, xv)?;
        Ok((g.value(m).clone(), g.value(s).clone()))
    }

    /// `log q(z | x, φ)` per example for fixed samples `z`.
    pub fn log_q_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var, z: Var) -> Result<Var> {
        let (m, s) = self.encode_graph(g, pv, x)?;
        let lp = g.gaussian_log_density(z, m, s)?;
        g.row_sums(lp)
    }

    /// Summed `log q(z | x, φ)` over a batch.
    pub fn log_q(&self, x: &Tensor, z: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let lp = self.log_q_graph(&mut g, &pv, xv, zv)?;
        Ok(g.value(lp).sum())
    }

    /// `z = μ + σ ⊙ ε`, differentiable in φ.
    pub fn reparam_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var, eps: Var) -> Result<Var> {
        let (m, s) = self.encode_graph(g, pv, x)?;
        self.reparam_from(g, m, s, eps)
    }

    pub(crate) fn reparam_from(&self, g: &mut Graph, m: Var, s: Var, eps: Var) -> Result<Var> {
        if g.shape(eps) != g.shape(m) {
            return Err(Error::ShapeMismatch {
                op: "reparam_sample",
                lhs: g.shape(eps).to_vec(),
                rhs: g.shape(m).to_vec(),
            });
        }
        let se = g.mul(s, eps)?;
        g.add(m, se)
    }

    pub fn reparam_sample(&self, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let ev = g.constant(eps.clone());
        let z = self.reparam_graph(&mut g, &pv, xv, ev)?;
        Ok(g.value(z).clone())
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, v I))` per example: `[b, d] -> [b]`.
pub fn kl_to_prior_graph(g: &mut Graph, mean: Var, scale: Var, prior_variance: f64) -> Result<Var> {
    let m2 = g.square(mean)?;
    let s2 = g.square(scale)?;
    let tot = g.add(m2, s2)?;
    let quad = g.scale(tot, 1.0 / prior_variance)?;
    let log_s2 = g.log(s2)?;
    let t = g.sub(quad, log_s2)?;
    let t = g.offset(t, prior_variance.ln() - 1.0)?;
    let per = g.row_sums(t)?;
    g.scale(per, 0.5)
}
