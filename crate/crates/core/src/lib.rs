//! Langevin predictive coding for latent-Gaussian generative models.
//!
//! Latents are inferred by (optionally preconditioned) unadjusted Langevin
//! chains started from an amortized warm-start model; chain states drive
//! ELBO-gradient learning of the decoder and forward/reverse/Jeffreys
//! training of the warm-start encoder. A reparameterized VAE baseline and
//! an evaluation suite (MMD, density/coverage, trajectory projection) are
//! included.

pub mod autodiff;
pub mod error;

pub use autodiff::{ParamSet, Tensor};
pub use error::{Error, Result};
pub mod models;
pub mod rng;
pub mod sampler;
pub mod objectives;
pub mod trainer;
pub mod eval;
pub mod io;
