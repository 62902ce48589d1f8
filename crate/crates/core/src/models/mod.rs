//! Generative and warm-start models.

pub mod checkpoint;
mod generative;
mod mlp;
mod warm;

pub use generative::{
    quantize_pixel, DecoderScale, GenerativeModel, JointEval, Likelihood, LikelihoodParams,
    ModelDims, SCALE_BETA, SCALE_FLOOR,
};
pub use mlp::Mlp;
pub use warm::{kl_to_prior_graph, WarmStartModel};

use crate::autodiff::{discretized_log_mass, Tensor};
use crate::error::{Error, Result};

/// Summed discretized-Gaussian log-probability with the number of bins
/// whose mass was floored at `1e-12`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogPmf {
    pub value: f64,
    pub floor_hits: usize,
}

/// `Σ log[Φ((x + h − μ)/σ) − Φ((x − h − μ)/σ)]` over pixels with `h = 1/510`;
/// the lowest and highest bins extend to ∓∞. `x` must lie on the 256-level grid.
pub fn discretized_gaussian_logpmf(x: &Tensor, mean: &Tensor, scale: &Tensor) -> Result<LogPmf> {
    if x.shape() != mean.shape() || x.shape() != scale.shape() {
        return Err(Error::ShapeMismatch {
            op: "discretized_gaussian_logpmf",
            lhs: x.shape().to_vec(),
            rhs: mean.shape().to_vec(),
        });
    }
    let mut out = LogPmf {
        value: 0.0,
        floor_hits: 0,
    };
    for ((&xv, &m), &s) in x.data().iter().zip(mean.data()).zip(scale.data()) {
        if !(s > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        let level = xv * 255.0;
        if (level - level.round()).abs() > 1e-6 || !(0.0..=1.0).contains(&xv) {
            return Err(Error::invalid(format!("{xv} is not on the 256-level grid")));
        }
        let (lp, d) = discretized_log_mass(xv, m, s);
        if d.is_none() {
            out.floor_hits += 1;
        }
        out.value += lp;
    }
    if out.floor_hits > 0 {
        log::debug!("{} zero-probability bins floored", out.floor_hits);
    }
    Ok(out)
}
