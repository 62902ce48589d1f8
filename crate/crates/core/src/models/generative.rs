use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::Mlp;
use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::error::{Error, Result};

/// Softplus sharpness used for every learned scale.
pub const SCALE_BETA: f64 = 0.3;
/// Lower bound added to learned decoder scales.
pub const SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Diagonal Gaussian on continuous observations.
    Gaussian,
    /// Gaussian integrated over 256 bins on `[0, 1]`.
    DiscretizedGaussian,
}

/// How the decoder produces its observation scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecoderScale {
    /// One learned scale per output channel, shared across latents.
    Global,
    /// A second decoder head emits a scale for every output.
    PerOutput,
    /// Constant, not learned.
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct ModelDims {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
}

/// Decoded likelihood parameters for a batch.
#[derive(Clone, Debug)]
pub struct LikelihoodParams {
    pub mean: Tensor,
    /// Same shape as `mean`, strictly positive.
    pub scale: Tensor,
}

/// Per-example log joint with the gradients requested from [`GenerativeModel::joint_eval`].
#[derive(Clone, Debug)]
pub struct JointEval {
    pub per_example: Vec<f64>,
    pub grad_z: Tensor,
    pub grad_theta: Option<ParamSet>,
    /// Discretized bins that hit the probability floor.
    pub floor_hits: usize,
}

impl JointEval {
    pub fn total(&self) -> f64 {
        self.per_example.iter().sum()
    }
}

/// Latent-Gaussian model `p(z) p(x | z, θ)` with an isotropic Gaussian prior.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub params: ParamSet,
    decoder: Mlp,
    prior_variance: f64,
    likelihood: Likelihood,
    scale: DecoderScale,
    latent_dim: usize,
    obs_dim: usize,
}

const GLOBAL_SCALE: &str = "decoder.scale";

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(
        dims: &ModelDims,
        prior_variance: f64,
        likelihood: Likelihood,
        scale: DecoderScale,
        rng: &mut R,
    ) -> Result<Self> {
        if !(prior_variance > 0.0) || dims.latent_dim == 0 || dims.obs_dim == 0 {
            return Err(Error::invalid(
                "prior variance must be positive and dimensions at least 1",
            ));
        }
        if let DecoderScale::Fixed(s) = scale {
            if !(s > 0.0) {
                return Err(Error::invalid("fixed decoder scale must be positive"));
            }
        }
        let heads = if scale == DecoderScale::PerOutput { 2 } else { 1 };
        let mut sizes = vec![dims.latent_dim];
        sizes.extend(&dims.hidden);
        sizes.push(heads * dims.obs_dim);
        let decoder = Mlp::new("decoder", sizes);
        let mut params = ParamSet::new();
        decoder.init(&mut params, rng, false)?;
        if scale == DecoderScale::Global {
            params.insert(GLOBAL_SCALE, Tensor::zeros([dims.obs_dim]))?;
        }
        Ok(GenerativeModel {
            params,
            decoder,
            prior_variance,
            likelihood,
            scale,
            latent_dim: dims.latent_dim,
            obs_dim: dims.obs_dim,
        })
    }

    /// Linear decoder `x = z W + b` with a fixed observation scale. `weight` is `[d, n]`.
    pub fn linear_gaussian(
        weight: Tensor,
        bias: Tensor,
        noise_scale: f64,
        prior_variance: f64,
    ) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "linear_gaussian",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (d, n) = (weight.shape()[0], weight.shape()[1]);
        let dims = ModelDims {
            latent_dim: d,
            obs_dim: n,
            hidden: vec![],
        };
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::Init, 0, 0);
        let mut model = Self::new(
            &dims,
            prior_variance,
            Likelihood::Gaussian,
            DecoderScale::Fixed(noise_scale),
            &mut rng,
        )?;
        *model.params.get_mut("decoder.0.weight")? = weight;
        *model.params.get_mut("decoder.0.bias")? = bias;
        Ok(model)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn decoder_scale(&self) -> DecoderScale {
        self.scale
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Mean `[b, n]` and scale (`[n]` or `[b, n]`, broadcastable) of `p(x | z)`.
    pub fn decode_graph(&self, g: &mut Graph, pv: &ParamVars, z: Var) -> Result<(Var, Var)> {
        let out = self.decoder.forward(g, pv, z)?;
        let n = self.obs_dim;
        match self.scale {
            DecoderScale::Fixed(s) => Ok((out, g.constant(Tensor::scalar(s)))),
            DecoderScale::Global => {
                let raw = pv.get(GLOBAL_SCALE)?;
                let sp = g.softplus(raw, SCALE_BETA)?;
                Ok((out, g.offset(sp, SCALE_FLOOR)?))
            }
            DecoderScale::PerOutput => {
                let mean = g.slice_cols(out, 0, n)?;
                let raw = g.slice_cols(out, n, 2 * n)?;
                let sp = g.softplus(raw, SCALE_BETA)?;
                Ok((mean, g.offset(sp, SCALE_FLOOR)?))
            }
        }
    }

    /// `log p(z)` per example: `[b, d] -> [b]`.
    pub fn log_prior_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let zero = g.constant(Tensor::scalar(0.0));
        let sd = g.constant(Tensor::scalar(self.prior_variance.sqrt()));
        let lp = g.gaussian_log_density(z, zero, sd)?;
        g.row_sums(lp)
    }

    /// `log p(x | z, θ)` per example.
    pub fn log_likelihood_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let (mean, scale) = self.decode_graph(g, pv, z)?;
        let lp = match self.likelihood {
            Likelihood::Gaussian => g.gaussian_log_density(x, mean, scale)?,
            Likelihood::DiscretizedGaussian => g.discretized_gaussian_log_mass(x, mean, scale)?,
        };
        g.row_sums(lp)
    }

    /// `log p(x, z | θ)` per example, including every normalising constant.
    pub fn log_joint_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var, z: Var) -> Result<Var> {
        let prior = self.log_prior_graph(g, z)?;
        let lik = self.log_likelihood_graph(g, pv, x, z)?;
        g.add(prior, lik)
    }

    fn check_batch(&self, x: &Tensor, z: &Tensor) -> Result<()> {
        let ok = x.rank() == 2
            && z.rank() == 2
            && x.shape()[0] == z.shape()[0]
            && x.shape()[1] == self.obs_dim
            && z.shape()[1] == self.latent_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "log_joint",
                lhs: x.shape().to_vec(),
                rhs: z.shape().to_vec(),
            })
        }
    }

    /// Summed log joint over a batch (`x: [b, n]`, `z: [b, d]`).
    pub fn log_joint(&self, x: &Tensor, z: &Tensor) -> Result<f64> {
        self.check_batch(x, z)?;
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let lp = self.log_joint_graph(&mut g, &pv, xv, zv)?;
        Ok(g.value(lp).sum())
    }

    /// Per-example log joint, its latent gradient and, when `with_theta`, the
    /// parameter gradient of the batch sum. One forward and one backward pass.
    pub fn joint_eval(&self, x: &Tensor, z: &Tensor, with_theta: bool) -> Result<JointEval> {
        self.check_batch(x, z)?;
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, with_theta);
        let xv = g.constant(x.clone());
        let zv = g.param(z.clone());
        let lp = self.log_joint_graph(&mut g, &pv, xv, zv)?;
        let per_example = g.value(lp).data().to_vec();
        let total = g.sum(lp)?;
        g.backward(total)?;
        Ok(JointEval {
            per_example,
            grad_z: g.grad_or_zero(zv),
            grad_theta: with_theta.then(|| self.params.grads_from(&g, &pv)),
            floor_hits: g.floor_hits(),
        })
    }

    /// Decoder output for a batch of latents.
    pub fn decode(&self, z: &Tensor) -> Result<LikelihoodParams> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let (mean, scale) = self.decode_graph(&mut g, &pv, zv)?;
        let mean = g.value(mean).clone();
        let target = mean.shape().to_vec();
        let scale = g.broadcast(scale, &target)?;
        Ok(LikelihoodParams {
            mean,
            scale: g.value(scale).clone(),
        })
    }

    /// Draws `z ~ p(z)` then `x ~ p(x | z)`; with `means_only` returns the
    /// decoder means instead of observation draws.
    pub fn ancestral_sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
        means_only: bool,
    ) -> Result<Tensor> {
        if count == 0 {
            return Ok(Tensor::zeros([0, self.obs_dim]));
        }
        let sd = self.prior_variance.sqrt();
        let z = crate::rng::normal_tensor(rng, &[count, self.latent_dim]).map(|v| sd * v);
        let lp = self.decode(&z)?;
        if means_only {
            return Ok(lp.mean);
        }
        let mut x = lp.mean;
        for (xv, &s) in x.data_mut().iter_mut().zip(lp.scale.data()) {
            let e: f64 = rng.sample(StandardNormal);
            *xv += s * e;
        }
        if self.likelihood == Likelihood::DiscretizedGaussian {
            for v in x.data_mut() {
                *v = quantize_pixel(*v);
            }
        }
        Ok(x)
    }
}

/// Snaps a value to the nearest level of the 256-level `[0, 1]` grid.
pub fn quantize_pixel(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
