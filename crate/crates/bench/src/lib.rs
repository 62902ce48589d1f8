//! Fixtures shared by the kernel benchmarks.

use lpc_core::models::{DecoderScale, GenerativeModel, Likelihood, ModelDims, WarmStartModel};
use lpc_core::rng::{normal_tensor, stream, Purpose};
use lpc_core::Tensor;

/// Mixture-scale models: 2-D latents and data, two hidden layers of 32.
pub fn desk_models() -> (GenerativeModel, WarmStartModel) {
    let dims = ModelDims {
        latent_dim: 2,
        obs_dim: 2,
        hidden: vec![32, 32],
    };
    let mut rng = stream(0, Purpose::Init, 0, 0);
    let gen = GenerativeModel::new(&dims, 1.0, Likelihood::Gaussian, DecoderScale::Global, &mut rng)
        .expect("valid dims");
    let enc = ModelDims {
        hidden: vec![32],
        ..dims
    };
    let warm = WarmStartModel::new(&enc, &mut rng).expect("valid dims");
    (gen, warm)
}

/// A `[rows, cols]` standard normal matrix from a fixed stream.
pub fn points(rows: usize, cols: usize, lane: u64) -> Tensor {
    normal_tensor(&mut stream(0, Purpose::Data, 0, lane), &[rows, cols])
}
