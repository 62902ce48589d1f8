//! Unadjusted Langevin chains over latent states.
//!
//! The plain step is the Euler–Maruyama discretisation of the overdamped
//! Langevin diffusion targeting `p(z | x)`:
//!
//! ```text
//! z' = z + γ ∇z log p(x, z) + √(2γ) η
//! ```
//!
//! The preconditioned step keeps an exponential moving average `m` of the
//! squared drift, bias-corrects it and uses `m̂ = √(m / (1 − βᵗ))` as a
//! diagonal metric, dividing the drift by `m̂` and scaling the noise to the
//! same metric. No Metropolis correction is applied and the metric's
//! curvature term is dropped.
//!
//! All chains of a batch advance together as rows of one `[chains, d]`
//! tensor; each row draws its noise from its own counter-based stream.

use std::io::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::GenerativeModel;
use crate::rng::ChainNoise;

/// Floor applied to `m̂` before it divides the drift.
pub const MHAT_FLOOR: f64 = 1e-8;

/// Unnormalised log density over batched latents.
pub trait LogDensity {
    /// Log density of each row of `z` and its gradient with respect to `z`.
    fn evaluate(&mut self, z: &Tensor) -> Result<Evaluation>;
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub logp: Vec<f64>,
    pub grad: Tensor,
}

/// Posterior `p(z | x, θ)` up to a constant, for a batch of observations.
pub struct Posterior<'a> {
    pub model: &'a GenerativeModel,
    pub x: &'a Tensor,
}

impl LogDensity for Posterior<'_> {
    fn evaluate(&mut self, z: &Tensor) -> Result<Evaluation> {
        let e = self.model.joint_eval(self.x, z, false)?;
        Ok(Evaluation {
            logp: e.per_example,
            grad: e.grad_z,
        })
    }
}

impl<F> LogDensity for F
where
    F: FnMut(&Tensor) -> Result<Evaluation>,
{
    fn evaluate(&mut self, z: &Tensor) -> Result<Evaluation> {
        self(z)
    }
}

/// Which way the diffusion scales with the preconditioner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseCovariance {
    /// `η ~ N(0, 2γ m̂⁻¹)`: drift and diffusion share the metric `m̂⁻¹`.
    InverseMhat,
    /// `η ~ N(0, 2γ m̂)`.
    Mhat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub precond_decay: f64,
    pub steps: usize,
    pub precondition: bool,
    /// Multiplies the injected noise; 0 recovers deterministic gradient ascent.
    pub noise_scale: f64,
    pub noise_cov: NoiseCovariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step_size: 0.1,
            precond_decay: 0.99,
            steps: 300,
            precondition: true,
            noise_scale: 1.0,
            noise_cov: NoiseCovariance::InverseMhat,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        if !(0.0..1.0).contains(&self.precond_decay) {
            return Err(Error::invalid("preconditioning decay must lie in [0, 1)"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("a chain needs at least one step"));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise scale must be non-negative"));
        }
        Ok(())
    }
}

/// Mutable state of a batch of chains.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    /// Latents, `[chains, d]`.
    pub z: Tensor,
    /// Second-moment EMA of the drift, same shape as `z`, elementwise ≥ 0.
    pub m: Tensor,
    /// Steps taken so far.
    pub t: u64,
}

impl ChainState {
    pub fn new(z: Tensor) -> Self {
        let m = Tensor::zeros(z.shape().to_vec());
        ChainState { z, m, t: 0 }
    }
}

/// What one step observed at its starting point.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// Log density at the pre-step state, per chain.
    pub logp: Vec<f64>,
    /// `‖∇z log p‖₂` at the pre-step state, per chain.
    pub grad_norm: Vec<f64>,
    /// Bias-corrected preconditioner used by this step (preconditioned steps only).
    pub mhat: Option<Tensor>,
    /// Entries of `m̂` raised to [`MHAT_FLOOR`].
    pub floored: usize,
}

/// Applies `z' = z + γ g ⊘ m̂ + s ⊙ η` with `s = noise_scale · √(2γ / m̂)`
/// (or `√(2γ m̂)`). `mhat = None` is the unpreconditioned update.
pub fn langevin_update(
    z: &Tensor,
    grad: &Tensor,
    mhat: Option<&Tensor>,
    step_size: f64,
    noise_scale: f64,
    noise_cov: NoiseCovariance,
    eta: &Tensor,
) -> Result<Tensor> {
    if z.shape() != grad.shape() || z.shape() != eta.shape() {
        return Err(Error::ShapeMismatch {
            op: "langevin_update",
            lhs: z.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let mut out = z.clone();
    let base = (2.0 * step_size).sqrt();
    match mhat {
        None => {
            for ((o, &g), &e) in out.data_mut().iter_mut().zip(grad.data()).zip(eta.data()) {
                *o += step_size * g + noise_scale * base * e;
            }
        }
        Some(mh) => {
            for (((o, &g), &e), &h) in out
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(eta.data())
                .zip(mh.data())
            {
                let sd = match noise_cov {
                    NoiseCovariance::InverseMhat => (2.0 * step_size / h).sqrt(),
                    NoiseCovariance::Mhat => (2.0 * step_size * h).sqrt(),
                };
                *o += step_size * g / h + noise_scale * sd * e;
            }
        }
    }
    Ok(out)
}

fn check_state(state: &ChainState, noise: &ChainNoise) -> Result<()> {
    if state.z.rank() != 2 || state.z.shape()[0] != noise.chains() {
        return Err(Error::ShapeMismatch {
            op: "chain_state",
            lhs: state.z.shape().to_vec(),
            rhs: vec![noise.chains()],
        });
    }
    Ok(())
}

fn finish(state: &ChainState, z: Tensor, m: Tensor) -> Result<ChainState> {
    if !z.is_finite() {
        return Err(Error::Divergence {
            step: state.t as usize,
            trace: None,
        });
    }
    Ok(ChainState {
        z,
        m,
        t: state.t + 1,
    })
}

fn evaluate_checked<D: LogDensity + ?Sized>(target: &mut D, z: &Tensor) -> Result<Evaluation> {
    let e = target.evaluate(z)?;
    if e.grad.shape() != z.shape() || e.logp.len() != z.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "log_density",
            lhs: z.shape().to_vec(),
            rhs: e.grad.shape().to_vec(),
        });
    }
    Ok(e)
}

/// One plain ULA step. Evaluates the gradient exactly once.
pub fn ula_step<D: LogDensity + ?Sized>(
    target: &mut D,
    state: &ChainState,
    step_size: f64,
    noise_scale: f64,
    noise: &mut ChainNoise,
) -> Result<(ChainState, StepInfo)> {
    check_state(state, noise)?;
    let e = evaluate_checked(target, &state.z)?;
    let eta = noise.draw(state.z.cols());
    let z = langevin_update(
        &state.z,
        &e.grad,
        None,
        step_size,
        noise_scale,
        NoiseCovariance::InverseMhat,
        &eta,
    )?;
    let info = StepInfo {
        grad_norm: e.grad.row_norms(),
        logp: e.logp,
        mhat: None,
        floored: 0,
    };
    Ok((finish(state, z, state.m.clone())?, info))
}

/// One preconditioned step:
/// `m ← βm + (1−β)g²`, `m̂ = √(m / (1 − β^{t+1}))`, then [`langevin_update`].
pub fn precond_ula_step<D: LogDensity + ?Sized>(
    target: &mut D,
    state: &ChainState,
    config: &SamplerConfig,
    noise: &mut ChainNoise,
) -> Result<(ChainState, StepInfo)> {
    check_state(state, noise)?;
    let beta = config.precond_decay;
    let e = evaluate_checked(target, &state.z)?;
    let m = state.m.zip_map(&e.grad, |m, g| beta * m + (1.0 - beta) * g * g)?;
    let correction = 1.0 - beta.powi((state.t + 1) as i32);
    let mut mhat = m.map(|v| (v / correction).sqrt());
    let mut floored = 0;
    for v in mhat.data_mut() {
        if *v < MHAT_FLOOR {
            *v = MHAT_FLOOR;
            floored += 1;
        }
    }
    if floored > 0 {
        log::debug!("step {}: {floored} preconditioner entries floored", state.t);
    }
    let eta = noise.draw(state.z.cols());
    let z = langevin_update(
        &state.z,
        &e.grad,
        Some(&mhat),
        config.step_size,
        config.noise_scale,
        config.noise_cov,
        &eta,
    )?;
    let info = StepInfo {
        grad_norm: e.grad.row_norms(),
        logp: e.logp,
        mhat: Some(mhat),
        floored,
    };
    Ok((finish(state, z, m)?, info))
}

/// Per-step diagnostics for one chain. Entry `t` describes the state the
/// `t`-th update started from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub step: Vec<usize>,
    pub logp: Vec<f64>,
    /// `logp[t] − logp[t−1]`, with 0 at `t = 0`.
    pub delta_logp: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    fn push(&mut self, logp: f64, grad_norm: f64) {
        let delta = self.logp.last().map_or(0.0, |prev| logp - prev);
        self.step.push(self.logp.len());
        self.logp.push(logp);
        self.delta_logp.push(delta);
        self.grad_norm.push(grad_norm);
    }
}

/// One [`StepTrace`] per chain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainTrace {
    pub chains: Vec<StepTrace>,
}

impl ChainTrace {
    fn new(chains: usize) -> Self {
        ChainTrace {
            chains: vec![StepTrace::default(); chains],
        }
    }

    fn record(&mut self, info: &StepInfo) {
        for (c, tr) in self.chains.iter_mut().enumerate() {
            tr.push(info.logp[c], info.grad_norm[c]);
        }
    }

    /// Writes `step,logp,delta_logp,grad_norm,chain_id` rows; chain ids start at `first_id`.
    pub fn write_csv<W: Write>(&self, out: W, first_id: usize, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["step", "logp", "delta_logp", "grad_norm", "chain_id"])?;
        }
        for (c, tr) in self.chains.iter().enumerate() {
            for t in 0..tr.len() {
                w.write_record(&[
                    tr.step[t].to_string(),
                    format!("{:?}", tr.logp[t]),
                    format!("{:?}", tr.delta_logp[t]),
                    format!("{:?}", tr.grad_norm[t]),
                    (first_id + c).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    /// `z⁽¹⁾ … z⁽ᵀ⁾`, each `[chains, d]`.
    pub samples: Vec<Tensor>,
    pub trace: ChainTrace,
    pub final_state: ChainState,
}

/// Runs `config.steps` updates from `z0` with a fresh preconditioner.
/// A diverging step aborts the run; the error carries the trace so far.
pub fn run_chain<D: LogDensity + ?Sized>(
    target: &mut D,
    z0: &Tensor,
    config: &SamplerConfig,
    noise: &mut ChainNoise,
) -> Result<ChainRun> {
    config.validate()?;
    if !z0.is_finite() {
        return Err(Error::invalid("initial state must be finite"));
    }
    let mut state = ChainState::new(z0.clone());
    check_state(&state, noise)?;
    let mut trace = ChainTrace::new(z0.shape()[0]);
    let mut samples = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let step = if config.precondition {
            precond_ula_step(target, &state, config, noise)
        } else {
            ula_step(target, &state, config.step_size, config.noise_scale, noise)
        };
        let (next, info) = match step {
            Ok(v) => v,
            Err(Error::Divergence { step, .. }) => {
                return Err(Error::Divergence {
                    step,
                    trace: Some(Box::new(trace)),
                })
            }
            Err(e) => return Err(e),
        };
        trace.record(&info);
        samples.push(next.z.clone());
        state = next;
    }
    Ok(ChainRun {
        samples,
        trace,
        final_state: state,
    })
}
