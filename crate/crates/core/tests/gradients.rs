//! Central finite differences against every analytic gradient used in training.

use lpc_core::models::{quantize_pixel, DecoderScale, GenerativeModel, Likelihood, ModelDims, WarmStartModel};
use lpc_core::objectives::{accumulate_theta_grad, forward_kl_grad, reparam_elbo_grads, GradAccumulator};
use lpc_core::rng::{normal_tensor, stream, Purpose};
use lpc_core::sampler::SamplerConfig;
use lpc_core::trainer::{lpc_gradients, Objective, TrainConfig};
use lpc_core::{ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest relative error between `analytic` and central differences of `f`.
fn fd_error(params: &ParamSet, analytic: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> f64 {
    let base = params.flatten();
    let grad = analytic.flatten();
    assert_eq!(base.len(), grad.len());
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + H;
        p.assign_flat(&v).unwrap();
        let up = f(&p);
        v[i] = base[i] - H;
        p.assign_flat(&v).unwrap();
        let down = f(&p);
        let numeric = (up - down) / (2.0 * H);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

struct Instance {
    gen: GenerativeModel,
    warm: WarmStartModel,
    x: Tensor,
}

fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng, sd: f64) {
    let v: Vec<f64> = params
        .flatten()
        .into_iter()
        .map(|p| p + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    params.assign_flat(&v).unwrap();
}

fn instance(seed: u64) -> Instance {
    let mut rng = stream(seed, Purpose::Init, 1000, 0);
    let likelihood = if rng.random_bool(0.5) {
        Likelihood::Gaussian
    } else {
        Likelihood::DiscretizedGaussian
    };
    let scale = match rng.random_range(0..3) {
        0 => DecoderScale::Global,
        1 => DecoderScale::PerOutput,
        _ => DecoderScale::Fixed(rng.random_range(0.3..1.5)),
    };
    let dims = ModelDims {
        latent_dim: rng.random_range(1..=3),
        obs_dim: rng.random_range(1..=4),
        hidden: vec![rng.random_range(2..=5)],
    };
    let mut gen = GenerativeModel::new(&dims, rng.random_range(0.5..2.0), likelihood, scale, &mut rng).unwrap();
    let mut warm = WarmStartModel::new(&dims, &mut rng).unwrap();
    jitter(&mut gen.params, &mut rng, 0.3);
    jitter(&mut warm.params, &mut rng, 0.3);
    let b = rng.random_range(1..=3);
    let x = match likelihood {
        Likelihood::Gaussian => normal_tensor(&mut rng, &[b, dims.obs_dim]),
        Likelihood::DiscretizedGaussian => normal_tensor(&mut rng, &[b, dims.obs_dim])
            .map(|v| quantize_pixel(0.5 + 0.2 * v)),
    };
    Instance { gen, warm, x }
}

fn with_theta(gen: &GenerativeModel, theta: &ParamSet) -> GenerativeModel {
    let mut g = gen.clone();
    g.params = theta.clone();
    g
}

fn with_phi(warm: &WarmStartModel, phi: &ParamSet) -> WarmStartModel {
    let mut w = warm.clone();
    w.params = phi.clone();
    w
}

/// `Σ_b log N(z_b; 0, v I)`.
fn log_prior(z: &Tensor, v: f64) -> f64 {
    z.data().iter().map(|z| -0.5 * (LN_2PI + v.ln() + z * z / v)).sum()
}

/// `Σ_b [KL(q_b ‖ p(z)) − log p(x_b | z_b)]` with `z = μ + σ ε`, written
/// out with closed forms independent of the graph code.
fn negative_elbo(gen: &GenerativeModel, warm: &WarmStartModel, x: &Tensor, eps: &Tensor) -> f64 {
    let (mu, sd) = warm.encode(x).unwrap();
    let v = gen.prior_variance();
    let kl: f64 = mu
        .data()
        .iter()
        .zip(sd.data())
        .map(|(m, s)| 0.5 * ((m * m + s * s) / v - (s * s).ln() + v.ln() - 1.0))
        .sum();
    let z = warm.reparam_sample(x, eps).unwrap();
    let lik = gen.log_joint(x, &z).unwrap() - log_prior(&z, v);
    kl - lik
}

fn config(objective: Objective, steps: usize) -> TrainConfig {
    TrainConfig {
        objective,
        prior_init_batches: 0,
        sampler: SamplerConfig {
            steps,
            step_size: 0.05,
            ..SamplerConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn theta_accumulation_matches_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed);
        let mut rng = stream(seed, Purpose::Sample, 0, 0);
        let states: Vec<Tensor> = (0..3)
            .map(|_| normal_tensor(&mut rng, &[inst.x.rows(), inst.gen.latent_dim()]))
            .collect();
        let b = inst.x.rows() as f64;
        let mut acc = GradAccumulator::new(&inst.gen.params);
        for z in &states {
            accumulate_theta_grad(&mut acc, &inst.gen, &inst.x, z).unwrap();
        }
        let mut analytic = acc.mean();
        analytic.scale(-1.0 / b);
        let loss = |theta: &ParamSet| {
            let g = with_theta(&inst.gen, theta);
            -states.iter().map(|z| g.log_joint(&inst.x, z).unwrap()).sum::<f64>()
                / (states.len() as f64 * b)
        };
        let err = fd_error(&inst.gen.params, &analytic, loss);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn trainer_theta_gradient_matches_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed);
        let cfg = config(Objective::Jeffreys, 4);
        let grads = lpc_gradients(&inst.gen, &inst.warm, &inst.x, &cfg, 3).unwrap();
        // θ sees z⁽⁰⁾…z⁽ᵀ⁻¹⁾, the states the drift was evaluated at.
        let mut states = vec![grads.z0.clone()];
        states.extend(grads.run.samples[..grads.run.samples.len() - 1].iter().cloned());
        let b = inst.x.rows() as f64;
        let loss = |theta: &ParamSet| {
            let g = with_theta(&inst.gen, theta);
            -states.iter().map(|z| g.log_joint(&inst.x, z).unwrap()).sum::<f64>()
                / (states.len() as f64 * b)
        };
        let err = fd_error(&inst.gen.params, &grads.theta, loss);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn forward_kl_matches_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed);
        let mut rng = stream(seed, Purpose::Sample, 1, 0);
        let samples: Vec<Tensor> = (0..3)
            .map(|_| normal_tensor(&mut rng, &[inst.x.rows(), inst.gen.latent_dim()]))
            .collect();
        let (value, analytic) = forward_kl_grad(&inst.warm, &inst.x, &samples).unwrap();
        let loss = |phi: &ParamSet| {
            let w = with_phi(&inst.warm, phi);
            -samples.iter().map(|z| w.log_q(&inst.x, z).unwrap()).sum::<f64>() / samples.len() as f64
        };
        assert!((value - loss(&inst.warm.params)).abs() < 1e-10 * value.abs().max(1.0));
        let err = fd_error(&inst.warm.params, &analytic, loss);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn reverse_kl_matches_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed);
        let eps = normal_tensor(&mut stream(seed, Purpose::Reparam, 0, 0), &[inst.x.rows(), inst.gen.latent_dim()]);
        let (value, g_theta, g_phi) = reparam_elbo_grads(&inst.gen, &inst.warm, &inst.x, &eps).unwrap();
        let direct = negative_elbo(&inst.gen, &inst.warm, &inst.x, &eps);
        assert!((value - direct).abs() < 1e-9 * direct.abs().max(1.0), "{value} vs {direct}");
        let err = fd_error(&inst.warm.params, &g_phi, |phi| {
            negative_elbo(&inst.gen, &with_phi(&inst.warm, phi), &inst.x, &eps)
        });
        assert!(err < TOL, "seed {seed}: φ relative error {err}");
        let err = fd_error(&inst.gen.params, &g_theta, |theta| {
            negative_elbo(&with_theta(&inst.gen, theta), &inst.warm, &inst.x, &eps)
        });
        assert!(err < TOL, "seed {seed}: θ relative error {err}");
    }
}

#[test]
fn jeffreys_matches_finite_differences() {
    for seed in 0..100 {
        let inst = instance(seed);
        let cfg = config(Objective::Jeffreys, 3);
        let step = 5;
        let grads = lpc_gradients(&inst.gen, &inst.warm, &inst.x, &cfg, step).unwrap();
        let eps = normal_tensor(
            &mut stream(cfg.seed, Purpose::WarmStart, step, 0),
            &[inst.x.rows(), inst.gen.latent_dim()],
        );
        let b = inst.x.rows() as f64;
        let samples = &grads.run.samples;
        let loss = |phi: &ParamSet| {
            let w = with_phi(&inst.warm, phi);
            let fwd = -samples.iter().map(|z| w.log_q(&inst.x, z).unwrap()).sum::<f64>()
                / samples.len() as f64;
            let rev = negative_elbo(&inst.gen, &w, &inst.x, &eps);
            0.5 * (fwd + rev) / b
        };
        let err = fd_error(&inst.warm.params, &grads.phi, loss);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

