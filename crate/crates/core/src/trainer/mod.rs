//! Training loops: amortised-warm-start Langevin predictive coding and the
//! reparameterised VAE baseline.
//!
//! All parameter updates descend a loss. For θ that loss is the negative
//! chain-averaged log joint, so a descent step on it is the same as
//! ascending the accumulated log-probability gradient.

mod adam;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

pub use adam::{adam_update, AdamState};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{checkpoint, GenerativeModel, WarmStartModel};
use crate::objectives::{
    forward_kl_grad, jeffreys_grad, reparam_elbo_grads, reverse_kl_grad, GradAccumulator,
};
use crate::rng::{normal_tensor, stream, ChainNoise, Purpose};
use crate::sampler::{run_chain, ChainRun, ChainTrace, Evaluation, LogDensity, SamplerConfig};

/// Warm-start objective applied to φ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Forward,
    Reverse,
    Jeffreys,
    None,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Forward => "forward",
            Objective::Reverse => "reverse",
            Objective::Jeffreys => "jeffreys",
            Objective::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "forward" => Objective::Forward,
            "reverse" => Objective::Reverse,
            "jeffreys" => Objective::Jeffreys,
            "none" => Objective::None,
            _ => return Err(Error::invalid(format!("unknown objective `{s}`"))),
        })
    }

    fn uses_forward(self) -> bool {
        matches!(self, Objective::Forward | Objective::Jeffreys)
    }

    fn uses_reverse(self) -> bool {
        matches!(self, Objective::Reverse | Objective::Jeffreys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lpc,
    Vae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lpc => "lpc",
            Method::Vae => "vae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lpc" => Ok(Method::Lpc),
            "vae" => Ok(Method::Vae),
            _ => Err(Error::invalid(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Step size, chain length, preconditioning and noise of the inner chains.
    pub sampler: SamplerConfig,
    pub batch_size: usize,
    pub objective: Objective,
    /// Batches whose chains start from the prior instead of the warm-start model.
    pub prior_init_batches: u64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip applied separately to θ and φ.
    pub grad_clip: Option<f64>,
    /// Leading fraction of chain states excluded from the θ and forward-KL averages.
    pub burn_in: f64,
    /// Chains whose traces are kept in the step metrics.
    pub trace_chains: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lpc,
            learning_rate: 1e-3,
            sampler: SamplerConfig::default(),
            batch_size: 64,
            objective: Objective::Jeffreys,
            prior_init_batches: 50,
            epochs: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            burn_in: 0.0,
            trace_chains: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("gradient clip must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of leading chain states dropped from the averages.
    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in * self.sampler.steps as f64).floor() as usize
    }
}

/// Diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    /// Per-observation ELBO estimate: the chain-averaged log joint for LPC,
    /// the reparameterised ELBO for the VAE baseline.
    pub elbo: f64,
    /// Mean per-observation log joint at the last evaluated state.
    pub logp_mean: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    /// Mean `‖∇z log p‖` over the batch at the chain's initial state.
    pub z0_grad_norm: f64,
    pub floor_hits: usize,
    pub wall_ms: f64,
    /// Traces of the first `trace_chains` chains.
    pub trace: Option<ChainTrace>,
    /// The step was skipped after a divergence; the numeric fields are NaN.
    pub diverged: bool,
}

impl StepMetrics {
    fn skipped(step: u64) -> Self {
        StepMetrics {
            step,
            epoch: 0,
            elbo: f64::NAN,
            logp_mean: f64::NAN,
            grad_norm_theta: f64::NAN,
            grad_norm_phi: f64::NAN,
            z0_grad_norm: f64::NAN,
            floor_hits: 0,
            wall_ms: 0.0,
            trace: None,
            diverged: true,
        }
    }
}

/// Gradients assembled by one LPC step before any parameter moves.
#[derive(Clone, Debug)]
pub struct LpcGradients {
    /// `−∇θ` of the chain-averaged per-observation log joint.
    pub theta: ParamSet,
    /// The φ-gradient that is applied for the configured objective.
    pub phi: ParamSet,
    /// Forward-KL component, already divided by the batch size.
    pub phi_forward: Option<ParamSet>,
    /// Reverse-KL component, already divided by the batch size.
    pub phi_reverse: Option<ParamSet>,
    pub z0: Tensor,
    pub run: ChainRun,
    pub elbo: f64,
    pub logp_mean: f64,
    pub floor_hits: usize,
}

/// Chain target that also sums `∇θ log p(x, z)` at every evaluated state
/// past the burn-in.
struct AccumulatingPosterior<'a> {
    model: &'a GenerativeModel,
    x: &'a Tensor,
    acc: GradAccumulator,
    from: usize,
    evals: usize,
    logp_sum: f64,
    last_logp: f64,
    floor_hits: usize,
}

impl LogDensity for AccumulatingPosterior<'_> {
    fn evaluate(&mut self, z: &Tensor) -> Result<Evaluation> {
        let keep = self.evals >= self.from;
        let e = self.model.joint_eval(self.x, z, keep)?;
        if let Some(g) = &e.grad_theta {
            self.acc.add(g)?;
            self.logp_sum += e.total();
        }
        self.evals += 1;
        self.last_logp = e.total() / e.per_example.len() as f64;
        self.floor_hits += e.floor_hits;
        Ok(Evaluation {
            logp: e.per_example,
            grad: e.grad_z,
        })
    }
}

/// Initial chain state for global step `step`: a prior draw during the
/// prior-initialisation phase or when φ is not trained, otherwise `μφ(x) + σφ(x) ⊙ ε`. Returns the
/// state and the `ε` that produced it.
pub fn initial_state(
    gen: &GenerativeModel,
    warm: &WarmStartModel,
    x: &Tensor,
    config: &TrainConfig,
    step: u64,
) -> Result<(Tensor, Tensor)> {
    let shape = [x.rows(), gen.latent_dim()];
    let eps = normal_tensor(&mut stream(config.seed, Purpose::WarmStart, step, 0), &shape);
    let z0 = if step < config.prior_init_batches || config.objective == Objective::None {
        let sd = gen.prior_variance().sqrt();
        eps.map(|v| sd * v)
    } else {
        warm.reparam_sample(x, &eps)?
    };
    Ok((z0, eps))
}

/// Runs the chains for one batch and assembles both gradients.
pub fn lpc_gradients(
    gen: &GenerativeModel,
    warm: &WarmStartModel,
    x: &Tensor,
    config: &TrainConfig,
    step: u64,
) -> Result<LpcGradients> {
    config.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::invalid("training batch must be a nonempty [b, n] matrix"));
    }
    let b = x.rows() as f64;
    let (z0, eps) = initial_state(gen, warm, x, config, step)?;

    let phi_reverse = if config.objective.uses_reverse() {
        let (_, mut g) = reverse_kl_grad(gen, warm, x, &eps)?;
        g.scale(1.0 / b);
        Some(g)
    } else {
        None
    };

    let burn = config.burn_in_steps();
    let mut target = AccumulatingPosterior {
        model: gen,
        x,
        acc: GradAccumulator::new(&gen.params),
        from: burn,
        evals: 0,
        logp_sum: 0.0,
        last_logp: f64::NAN,
        floor_hits: 0,
    };
    let mut noise = ChainNoise::new(config.seed, step, x.rows());
    let run = run_chain(&mut target, &z0, &config.sampler, &mut noise)?;

    let kept = target.acc.count as f64;
    let mut theta = target.acc.sum.clone();
    theta.scale(-1.0 / (kept * b));

    let phi_forward = if config.objective.uses_forward() {
        let (_, mut g) = forward_kl_grad(warm, x, &run.samples[burn..])?;
        g.scale(1.0 / b);
        Some(g)
    } else {
        None
    };

    let phi = match (&phi_forward, &phi_reverse) {
        (Some(f), Some(r)) => jeffreys_grad(f, r)?,
        (Some(f), None) => f.clone(),
        (None, Some(r)) => r.clone(),
        (None, None) => warm.params.zeros_like(),
    };

    Ok(LpcGradients {
        theta,
        phi,
        phi_forward,
        phi_reverse,
        z0,
        elbo: target.logp_sum / (kept * b),
        logp_mean: target.last_logp,
        floor_hits: target.floor_hits,
        run,
    })
}

fn clip(grad: &mut ParamSet, limit: Option<f64>) {
    if let Some(c) = limit {
        let n = grad.norm();
        if n > c {
            grad.scale(c / n);
        }
    }
}

fn check_update(theta: &ParamSet, phi: &ParamSet, step: u64) -> Result<()> {
    if theta.is_finite() && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step: step as usize, trace: None })
    }
}

/// One LPC step: chains, gradient assembly, then one Adam update each for θ
/// and φ. On error no parameter or optimiser state changes.
#[allow(clippy::too_many_arguments)]
pub fn lpc_train_step(
    gen: &mut GenerativeModel,
    warm: &mut WarmStartModel,
    adam_theta: &mut AdamState,
    adam_phi: &mut AdamState,
    x: &Tensor,
    config: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let mut grads = lpc_gradients(gen, warm, x, config, step)?;
    let (gt, gp) = (grads.theta.norm(), grads.phi.norm());
    clip(&mut grads.theta, config.grad_clip);
    clip(&mut grads.phi, config.grad_clip);
    check_update(&grads.theta, &grads.phi, step)?;

    adam_update(&mut gen.params, &grads.theta, adam_theta, config.learning_rate)?;
    if config.objective != Objective::None {
        adam_update(&mut warm.params, &grads.phi, adam_phi, config.learning_rate)?;
    }

    let trace = &grads.run.trace;
    let z0_grad_norm = trace.chains.iter().map(|c| c.grad_norm[0]).sum::<f64>()
        / trace.chains.len() as f64;
    let kept = config.trace_chains.min(trace.chains.len());
    Ok(StepMetrics {
        step,
        epoch: 0,
        elbo: grads.elbo,
        logp_mean: grads.logp_mean,
        grad_norm_theta: gt,
        grad_norm_phi: gp,
        z0_grad_norm,
        floor_hits: grads.floor_hits,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        trace: (kept > 0).then(|| ChainTrace {
            chains: trace.chains[..kept].to_vec(),
        }),
        diverged: false,
    })
}

/// One VAE step on the single-sample reparameterised ELBO with a joint
/// Adam update of θ and φ. Uses the same `ε` stream as the LPC warm start.
#[allow(clippy::too_many_arguments)]
pub fn vae_train_step(
    gen: &mut GenerativeModel,
    warm: &mut WarmStartModel,
    adam_theta: &mut AdamState,
    adam_phi: &mut AdamState,
    x: &Tensor,
    config: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    config.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::invalid("training batch must be a nonempty [b, n] matrix"));
    }
    let start = Instant::now();
    let b = x.rows() as f64;
    let eps = normal_tensor(
        &mut stream(config.seed, Purpose::WarmStart, step, 0),
        &[x.rows(), gen.latent_dim()],
    );
    let (loss, mut gt, mut gp) = reparam_elbo_grads(gen, warm, x, &eps)?;
    gt.scale(1.0 / b);
    gp.scale(1.0 / b);
    let z = warm.reparam_sample(x, &eps)?;
    let e = gen.joint_eval(x, &z, false)?;
    let (nt, np) = (gt.norm(), gp.norm());
    clip(&mut gt, config.grad_clip);
    clip(&mut gp, config.grad_clip);
    check_update(&gt, &gp, step)?;
    adam_update(&mut gen.params, &gt, adam_theta, config.learning_rate)?;
    adam_update(&mut warm.params, &gp, adam_phi, config.learning_rate)?;
    let z0_grad_norm = e.grad_z.row_norms().iter().sum::<f64>() / b;
    Ok(StepMetrics {
        step,
        epoch: 0,
        elbo: -loss / b,
        logp_mean: e.total() / b,
        grad_norm_theta: nt,
        grad_norm_phi: np,
        z0_grad_norm,
        floor_hits: e.floor_hits,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        trace: None,
        diverged: false,
    })
}

/// Models, optimiser states and the global step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub gen: GenerativeModel,
    pub warm: WarmStartModel,
    pub adam_theta: AdamState,
    pub adam_phi: AdamState,
    /// Batches processed so far.
    pub step: u64,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(gen: GenerativeModel, warm: WarmStartModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if gen.latent_dim() != warm.latent_dim() || gen.obs_dim() != warm.obs_dim() {
            return Err(Error::invalid(
                "generative and warm-start models disagree on dimensions",
            ));
        }
        let (b1, b2, e) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Trainer {
            adam_theta: AdamState::new(&gen.params, b1, b2, e),
            adam_phi: AdamState::new(&warm.params, b1, b2, e),
            gen,
            warm,
            step: 0,
            config,
        })
    }

    /// Advances one step on `x`. A failing step leaves the trainer untouched
    /// and reports the batch index within its epoch.
    pub fn train_step(&mut self, x: &Tensor, batch: usize) -> Result<StepMetrics> {
        let mut gen = self.gen.clone();
        let mut warm = self.warm.clone();
        let mut at = self.adam_theta.clone();
        let mut ap = self.adam_phi.clone();
        let step_fn = match self.config.method {
            Method::Lpc => lpc_train_step,
            Method::Vae => vae_train_step,
        };
        let metrics = step_fn(&mut gen, &mut warm, &mut at, &mut ap, x, &self.config, self.step)
            .map_err(|e| Error::TrainStep {
                step: self.step,
                batch,
                source: Box::new(e),
            })?;
        self.gen = gen;
        self.warm = warm;
        self.adam_theta = at;
        self.adam_phi = ap;
        self.step += 1;
        Ok(metrics)
    }

    /// Everything needed to resume: both parameter sets, Adam moments and counters.
    pub fn checkpoint(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        let groups = [
            ("theta", &self.gen.params),
            ("phi", &self.warm.params),
            ("adam_theta.m", &self.adam_theta.m),
            ("adam_theta.v", &self.adam_theta.v),
            ("adam_phi.m", &self.adam_phi.m),
            ("adam_phi.v", &self.adam_phi.v),
        ];
        for (prefix, set) in groups {
            for (name, t) in set.iter() {
                out.insert(format!("{prefix}.{name}"), t.clone())?;
            }
        }
        out.insert("meta.step", Tensor::scalar(self.step as f64))?;
        out.insert("meta.adam_theta.step", Tensor::scalar(self.adam_theta.step as f64))?;
        out.insert("meta.adam_phi.step", Tensor::scalar(self.adam_phi.step as f64))?;
        Ok(out)
    }

    /// Restores state written by [`Trainer::checkpoint`] into a trainer
    /// built with the same architecture.
    pub fn restore(&mut self, ckpt: &ParamSet) -> Result<()> {
        fn fill(set: &mut ParamSet, ckpt: &ParamSet, prefix: &str) -> Result<()> {
            for (name, t) in set.iter_mut() {
                let key = format!("{prefix}.{name}");
                let src = ckpt.get(&key).map_err(|_| Error::MissingParam(key.clone()))?;
                if src.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "restore",
                        lhs: src.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                *t = src.clone();
            }
            Ok(())
        }
        let counter = |key: &str| -> Result<u64> {
            let v = ckpt.get(key).map_err(|_| Error::MissingParam(key.into()))?.item()?;
            Ok(v as u64)
        };
        let mut next = self.clone();
        fill(&mut next.gen.params, ckpt, "theta")?;
        fill(&mut next.warm.params, ckpt, "phi")?;
        fill(&mut next.adam_theta.m, ckpt, "adam_theta.m")?;
        fill(&mut next.adam_theta.v, ckpt, "adam_theta.v")?;
        fill(&mut next.adam_phi.m, ckpt, "adam_phi.m")?;
        fill(&mut next.adam_phi.v, ckpt, "adam_phi.v")?;
        next.step = counter("meta.step")?;
        next.adam_theta.step = counter("meta.adam_theta.step")?;
        next.adam_phi.step = counter("meta.adam_phi.step")?;
        *self = next;
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Total steps of the configured run on `n` examples.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.batches_per_epoch(n) * self.config.epochs as u64
    }
}

/// Example order for `epoch`, a function of `(seed, epoch)` only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, epoch as u64, 0));
    order
}

/// Where and how often [`fit`] writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `metrics.csv`, `traces.csv` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    /// Calls the hook every this many steps.
    pub eval_every: Option<u64>,
    /// Stops after this many steps of the current call (for interrupted runs).
    pub max_steps: Option<u64>,
    /// Skip diverging batches (leaving the state untouched) instead of aborting.
    pub skip_divergent: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub metrics: Vec<StepMetrics>,
    /// Batches skipped after a divergence.
    pub diverged: usize,
    pub final_checkpoint: Option<PathBuf>,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "step",
    "epoch",
    "elbo",
    "logp_mean",
    "grad_norm_theta",
    "grad_norm_phi",
    "wall_ms",
];

fn metric_row(m: &StepMetrics) -> [String; 7] {
    [
        m.step.to_string(),
        m.epoch.to_string(),
        format!("{:?}", m.elbo),
        format!("{:?}", m.logp_mean),
        format!("{:?}", m.grad_norm_theta),
        format!("{:?}", m.grad_norm_phi),
        format!("{:.3}", m.wall_ms),
    ]
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn open_log(path: &Path, append: bool) -> Result<(BufWriter<File>, bool)> {
    let exists = append && path.exists();
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((BufWriter::new(f), !exists))
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.lpc"))
}

/// Epoch loop over the rows of `data`, continuing from `trainer.step`.
///
/// Each step's batch is a slice of the `(seed, epoch)` permutation, so a run
/// resumed from a checkpoint visits the same batches with the same random
/// streams as an uninterrupted one. The hook sees the trainer every
/// `eval_every` steps and after the last step.
pub fn fit<H>(
    trainer: &mut Trainer,
    data: &Tensor,
    opts: &FitOptions,
    mut hook: H,
) -> Result<FitReport>
where
    H: FnMut(&Trainer, &StepMetrics) -> Result<()>,
{
    if data.rank() != 2 || data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = data.rows();
    let bpe = trainer.batches_per_epoch(n);
    let total = trainer.total_steps(n);
    let resuming = trainer.step > 0;
    let mut logs = match &opts.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let mpath = dir.join("metrics.csv");
            let tpath = dir.join("traces.csv");
            let (mut mw, mhead) = open_log(&mpath, resuming)?;
            if mhead {
                writeln!(mw, "{}", METRIC_COLUMNS.join(",")).map_err(|e| Error::io(&mpath, e))?;
            }
            let (tw, thead) = open_log(&tpath, resuming)?;
            Some((mw, mpath, tw, tpath, thead))
        }
        None => None,
    };

    let mut report = FitReport::default();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    let stop = opts
        .max_steps
        .map_or(total, |k| total.min(trainer.step + k));
    let bs = trainer.config.batch_size;
    while trainer.step < stop {
        let epoch = (trainer.step / bpe) as usize;
        let batch = (trainer.step % bpe) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(trainer.config.seed, epoch, n)));
        }
        let order = &cached.as_ref().expect("order cached").1;
        let idx = &order[batch * bs..((batch + 1) * bs).min(n)];
        let x = data.select_rows(idx);
        let mut m = match trainer.train_step(&x, batch) {
            Ok(m) => m,
            Err(Error::TrainStep { step, batch, source })
                if opts.skip_divergent && matches!(*source, Error::Divergence { .. }) =>
            {
                log::warn!("skipping diverged batch {batch} at step {step}");
                report.diverged += 1;
                trainer.step += 1;
                StepMetrics::skipped(step)
            }
            Err(e) => return Err(e),
        };
        m.epoch = epoch;

        if let Some((mw, mpath, tw, tpath, thead)) = logs.as_mut() {
            writeln!(mw, "{}", metric_row(&m).join(",")).map_err(|e| Error::io(&*mpath, e))?;
            if let Some(tr) = &m.trace {
                let mut buf = Vec::new();
                tr.write_csv(&mut buf, 0, *thead)?;
                *thead = false;
                let text = String::from_utf8(buf).expect("csv is utf-8");
                for line in text.lines() {
                    if line.starts_with("step") {
                        writeln!(tw, "train_step,{line}")
                    } else {
                        writeln!(tw, "{},{line}", m.step)
                    }
                    .map_err(|e| Error::io(&*tpath, e))?;
                }
            }
        }
        let due = |every: Option<u64>| every.is_some_and(|k| k > 0 && trainer.step % k == 0);
        if due(opts.eval_every) || trainer.step == total {
            hook(trainer, &m)?;
        }
        if let (Some(dir), true) = (&opts.out_dir, due(opts.checkpoint_every)) {
            checkpoint::save(checkpoint_path(dir, trainer.step), &trainer.checkpoint()?)?;
        }
        report.metrics.push(m);
    }
    if let Some((mut mw, mpath, mut tw, tpath, _)) = logs {
        mw.flush().map_err(|e| Error::io(&mpath, e))?;
        tw.flush().map_err(|e| Error::io(&tpath, e))?;
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("final.lpc");
        checkpoint::save(&path, &trainer.checkpoint()?)?;
        report.final_checkpoint = Some(path);
    }
    Ok(report)
}
