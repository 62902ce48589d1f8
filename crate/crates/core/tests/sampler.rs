use lpc_core::eval::linear_gaussian_posterior;
use lpc_core::models::GenerativeModel;
use lpc_core::rng::{normal_tensor, stream, ChainNoise, Purpose};
use lpc_core::sampler::{
    langevin_update, precond_ula_step, run_chain, ChainState, Evaluation, NoiseCovariance,
    Posterior, SamplerConfig,
};
use lpc_core::{Error, Result, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

/// Diagonal Gaussian `N(0, diag(1/λ))` with its exact log density.
fn diag_gaussian(precision: Vec<f64>) -> impl FnMut(&Tensor) -> Result<Evaluation> {
    move |z: &Tensor| {
        let d = precision.len();
        let logp = (0..z.rows())
            .map(|i| {
                -0.5 * z.row(i).iter().zip(&precision).map(|(v, l)| l * v * v).sum::<f64>()
            })
            .collect();
        let mut grad = z.clone();
        for (k, g) in grad.data_mut().iter_mut().enumerate() {
            *g *= -precision[k % d];
        }
        Ok(Evaluation { logp, grad })
    }
}

fn ula(steps: usize, gamma: f64) -> SamplerConfig {
    SamplerConfig {
        step_size: gamma,
        steps,
        precondition: false,
        ..SamplerConfig::default()
    }
}

fn column(samples: &[Tensor], j: usize) -> Vec<f64> {
    samples.iter().map(|s| s.get2(0, j)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard error of the mean from non-overlapping batch means.
fn batch_se(v: &[f64], batches: usize) -> f64 {
    let size = v.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&v[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Integrated autocorrelation time with Sokal's adaptive window (c = 5).
fn autocorrelation_time(v: &[f64]) -> f64 {
    let n = v.len();
    let m = mean(v);
    let c0: f64 = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = (0..n - lag).map(|i| (v[i] - m) * (v[i + lag] - m)).sum::<f64>() / n as f64;
        tau += 2.0 * c / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau
}

#[test]
fn ar1_stationary_variance_matches_recursion() {
    // z' = (1 − γλ) z + √(2γ) η has stationary variance 2γ / (1 − (1 − γλ)²).
    for &(lambda, gamma) in &[(1.0, 0.1), (1.0, 0.5), (4.0, 0.2)] {
        let mut target = diag_gaussian(vec![lambda]);
        let mut noise = ChainNoise::new(11, 0, 1);
        let run = run_chain(&mut target, &Tensor::zeros([1, 1]), &ula(100_000, gamma), &mut noise)
            .unwrap();
        let xs = column(&run.samples[1000..], 0);
        let a: f64 = 1.0 - gamma * lambda;
        let expected = 2.0 * gamma / (1.0 - a * a);
        let got = variance(&xs);
        assert!(
            (got / expected - 1.0).abs() < 0.05,
            "λ={lambda} γ={gamma}: {got} vs {expected}"
        );
        // The exact-posterior variance 1/λ is measurably off for large γλ.
        if gamma * lambda >= 0.5 {
            assert!((got * lambda - 1.0).abs() > 0.1);
        }
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((mean(&sq) - expected).abs() < 3.0 * batch_se(&sq, 50) + 1e-12);
        assert!(mean(&xs).abs() < 3.0 * batch_se(&xs, 50));
    }
}

fn random_linear_model(seed: u64, d: usize, n: usize, scale: f64) -> (Tensor, Tensor, Tensor) {
    let mut rng = stream(seed, Purpose::Data, 77, 0);
    let w = normal_tensor(&mut rng, &[d, n]).map(|v| scale * v);
    let b = normal_tensor(&mut rng, &[n]).map(|v| 0.5 * v);
    let x = normal_tensor(&mut rng, &[n]);
    (w, b, x)
}

#[test]
fn long_chain_matches_linear_gaussian_posterior() {
    let (d, n, sigma, v) = (4, 8, 1.0, 1.0);
    let (w, b, x) = random_linear_model(3, d, n, 0.3);
    let model = GenerativeModel::linear_gaussian(w.clone(), b.clone(), sigma, v).unwrap();
    let post = linear_gaussian_posterior(&w, &b, sigma, v, &x).unwrap();

    let gamma = 0.3;
    let xb = x.reshape([1, n]).unwrap();
    let mut target = Posterior { model: &model, x: &xb };
    let mut noise = ChainNoise::new(5, 0, 1);
    let z0 = Tensor::zeros([1, d]);
    let run = run_chain(&mut target, &z0, &ula(50_000, gamma), &mut noise).unwrap();
    let kept = &run.samples[25_000..];

    // Discrete-time stationary covariance (Λ − γΛ²/2)⁻¹.
    let lam = DMatrix::from_row_slice(d, d, post.precision.data());
    let corrected = (&lam - &lam * &lam * (gamma / 2.0)).try_inverse().unwrap();
    for j in 0..d {
        let xs = column(kept, j);
        let se = batch_se(&xs, 50);
        assert!(
            (mean(&xs) - post.mean.data()[j]).abs() < 3.0 * se,
            "mean {j}: {} vs {} (se {se})",
            mean(&xs),
            post.mean.data()[j]
        );
        let var = variance(&xs);
        assert!((var / corrected[(j, j)] - 1.0).abs() < 0.05, "var {j}: {var} vs {}", corrected[(j, j)]);
    }
}

#[test]
fn noiseless_unpreconditioned_chain_ascends_log_joint() {
    let mut rng = stream(0, Purpose::Sample, 0, 0);
    let mut violations = 0;
    for trial in 0..1000 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let sigma = rng.random_range(0.3..2.0);
        let v = rng.random_range(0.5..2.0);
        let (w, b, x) = random_linear_model(trial, d, n, 1.0);
        let model = GenerativeModel::linear_gaussian(w.clone(), b.clone(), sigma, v).unwrap();
        let post = linear_gaussian_posterior(&w, &b, sigma, v, &x).unwrap();
        let lam = DMatrix::from_row_slice(d, d, post.precision.data());
        let lmax = lam.symmetric_eigen().eigenvalues.max();
        let gamma = rng.random_range(0.01..0.999) * 2.0 / lmax;

        let cfg = SamplerConfig {
            noise_scale: 0.0,
            ..ula(40, gamma)
        };
        let xb = x.reshape([1, n]).unwrap();
        let mut target = Posterior { model: &model, x: &xb };
        let z0 = normal_tensor(&mut rng, &[1, d]).map(|v| 3.0 * v);
        let run = run_chain(&mut target, &z0, &cfg, &mut ChainNoise::new(0, 0, 1)).unwrap();
        let lp = &run.trace.chains[0].logp;
        let last = model.log_joint(&xb, &run.final_state.z).unwrap();
        let mut seq = lp.clone();
        seq.push(last);
        for pair in seq.windows(2) {
            if pair[1] < pair[0] - 1e-12 * pair[0].abs().max(1.0) {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn bias_corrected_preconditioner_is_abs_gradient_at_first_step() {
    let mut rng = stream(1, Purpose::Sample, 0, 0);
    for _ in 0..100 {
        let beta = rng.random_range(0.0..0.999);
        let prec: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..10.0)).collect();
        let z0 = normal_tensor(&mut rng, &[4, 3]);
        let g0 = (diag_gaussian(prec.clone()))(&z0).unwrap().grad;
        let cfg = SamplerConfig {
            precond_decay: beta,
            ..SamplerConfig::default()
        };
        let (_, info) = precond_ula_step(
            &mut diag_gaussian(prec),
            &ChainState::new(z0),
            &cfg,
            &mut ChainNoise::new(0, 0, 4),
        )
        .unwrap();
        for (h, g) in info.mhat.unwrap().data().iter().zip(g0.data()) {
            assert!((h - g.abs()).abs() <= 1e-12 * g.abs().max(1.0));
        }
    }
}

#[test]
fn unit_preconditioner_matches_plain_update() {
    let mut rng = stream(2, Purpose::Sample, 0, 0);
    let z = normal_tensor(&mut rng, &[3, 5]);
    let g = normal_tensor(&mut rng, &[3, 5]);
    let eta = normal_tensor(&mut rng, &[3, 5]);
    let ones = Tensor::full([3, 5], 1.0);
    let plain = langevin_update(&z, &g, None, 0.07, 1.0, NoiseCovariance::InverseMhat, &eta).unwrap();
    for cov in [NoiseCovariance::InverseMhat, NoiseCovariance::Mhat] {
        let pre = langevin_update(&z, &g, Some(&ones), 0.07, 1.0, cov, &eta).unwrap();
        assert_eq!(plain, pre);
    }
}

#[test]
fn chains_do_not_depend_on_batch_companions() {
    let prec = vec![1.0, 3.0];
    let z0 = Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.0, -3.0]]).unwrap();
    for precondition in [false, true] {
        let cfg = SamplerConfig {
            steps: 25,
            step_size: 0.05,
            precondition,
            ..SamplerConfig::default()
        };
        let all = run_chain(&mut diag_gaussian(prec.clone()), &z0, &cfg, &mut ChainNoise::new(9, 4, 3))
            .unwrap();
        let again = run_chain(&mut diag_gaussian(prec.clone()), &z0, &cfg, &mut ChainNoise::new(9, 4, 3))
            .unwrap();
        assert_eq!(all.samples, again.samples);
        // Chain 0 alone sees lane 0 and reproduces its row bit for bit.
        let first = z0.select_rows(&[0]);
        let solo = run_chain(&mut diag_gaussian(prec.clone()), &first, &cfg, &mut ChainNoise::new(9, 4, 1))
            .unwrap();
        for (a, s) in all.samples.iter().zip(&solo.samples) {
            assert_eq!(a.row(0), s.row(0));
        }
    }
}

#[test]
fn diverging_chain_reports_step_and_partial_trace() {
    let cfg = ula(500, 3.0);
    let err = run_chain(
        &mut diag_gaussian(vec![1e4]),
        &Tensor::full([1, 1], 1.0),
        &cfg,
        &mut ChainNoise::new(0, 0, 1),
    )
    .unwrap_err();
    match err {
        Error::Divergence { step, trace } => {
            let trace = trace.expect("partial trace attached");
            assert_eq!(trace.chains[0].len(), step);
            assert!(step > 0 && step < 500);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn preconditioning_narrows_autocorrelation_spread() {
    // Covariance diag(100, 1). At stationarity m̂ᵢ ≈ √λᵢ, so the effective
    // per-coordinate rate γλᵢ/m̂ᵢ = γ√λᵢ: the time ratio drops from 100 to 10.
    let prec = vec![0.01, 1.0];
    let gamma = 0.1;
    let steps = 400_000;
    // A start at the mode has g = 0 and m̂ at its floor, which kicks the first step far out.
    let z0 = Tensor::from_rows(&[[10.0, 1.0]]).unwrap();
    let taus = |precondition: bool| {
        let cfg = SamplerConfig {
            steps,
            step_size: gamma,
            precondition,
            precond_decay: 0.99,
            ..SamplerConfig::default()
        };
        let run = run_chain(&mut diag_gaussian(prec.clone()), &z0, &cfg, &mut ChainNoise::new(21, 0, 1))
            .unwrap();
        let kept = &run.samples[steps / 10..];
        [autocorrelation_time(&column(kept, 0)), autocorrelation_time(&column(kept, 1))]
    };
    let plain = taus(false);
    let pre = taus(true);
    let plain_ratio = plain[0] / plain[1];
    let pre_ratio = pre[0] / pre[1];
    assert!(plain_ratio > 10.0, "plain ratio {plain_ratio}");
    assert!(pre_ratio < plain_ratio / 4.0, "{pre_ratio} vs {plain_ratio}");
    assert!((4.0..25.0).contains(&pre_ratio), "preconditioned ratio {pre_ratio}");
}

#[test]
fn trace_deltas_are_successive_differences() {
    let cfg = SamplerConfig {
        steps: 30,
        ..SamplerConfig::default()
    };
    let z0 = Tensor::from_rows(&[[2.0, -1.0], [0.1, 0.2]]).unwrap();
    let run = run_chain(&mut diag_gaussian(vec![1.0, 2.0]), &z0, &cfg, &mut ChainNoise::new(3, 3, 2))
        .unwrap();
    for tr in &run.trace.chains {
        assert_eq!(tr.len(), 30);
        assert_eq!(tr.delta_logp[0], 0.0);
        for t in 1..tr.len() {
            assert_eq!(tr.delta_logp[t], tr.logp[t] - tr.logp[t - 1]);
        }
    }
    assert_eq!(run.final_state.t, 30);
    assert!(run.final_state.m.data().iter().all(|&m| m >= 0.0));
}
