//! Experiment commands behind the CLI: train, sample, eval, trace, project
//! and compare. Each returns its results and, given an output location,
//! writes them as CSV, JSON, PGM and checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{
    chain_trajectory, pca_trajectory_projection, trace_summary, MetricReport, ProjectionOptions,
    TrajectoryProjection,
};
use crate::models::{checkpoint, GenerativeModel, ModelDims, WarmStartModel};
use crate::rng::{stream, ChainNoise, Purpose};
use crate::sampler::{run_chain, ChainTrace, Posterior};
use crate::trainer::{fit, initial_state, FitOptions, FitReport, Objective, Trainer};

use super::config::{ExperimentConfig, MetricKind};
use super::datasets::{load_dataset, reference_sample, Dataset};
use super::formats::{unit_to_bytes, write_pgm};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fresh models for `cfg`; θ and φ draw their initial weights from separate streams.
pub fn build_models(cfg: &ExperimentConfig, obs_dim: usize) -> Result<(GenerativeModel, WarmStartModel)> {
    let m = &cfg.model;
    let dec = ModelDims {
        latent_dim: m.latent_dim,
        obs_dim,
        hidden: m.hidden.clone(),
    };
    let enc = ModelDims {
        hidden: m.encoder_hidden.clone(),
        ..dec.clone()
    };
    let seed = cfg.train.seed;
    let gen = GenerativeModel::new(
        &dec,
        m.prior_variance,
        m.likelihood,
        m.decoder_scale,
        &mut stream(seed, Purpose::Init, 0, 0),
    )?;
    let warm = WarmStartModel::new(&enc, &mut stream(seed, Purpose::Init, 1, 0))?;
    Ok((gen, warm))
}

/// A trainer for `cfg`, restored from `checkpoint` when given.
pub fn build_trainer(cfg: &ExperimentConfig, obs_dim: usize, ckpt: Option<&Path>) -> Result<Trainer> {
    let (gen, warm) = build_models(cfg, obs_dim)?;
    let mut t = Trainer::new(gen, warm, cfg.train.clone())?;
    if let Some(path) = ckpt {
        t.restore(&checkpoint::load(path)?)?;
    }
    Ok(t)
}

/// Metrics between `eval.samples` ancestral samples and as many reference points.
pub fn evaluate_model(
    gen: &GenerativeModel,
    reference: &Tensor,
    cfg: &ExperimentConfig,
    counter: u64,
) -> Result<MetricReport> {
    let m = cfg.eval.samples.min(reference.rows());
    let real = reference.select_rows(&(0..m).collect::<Vec<_>>());
    let mut rng = stream(cfg.train.seed, Purpose::Eval, counter, 0);
    let fake = gen.ancestral_sample(cfg.eval.samples, &mut rng, false)?;
    if !fake.is_finite() {
        return Err(Error::NumericFault { op: "ancestral_sample" });
    }
    MetricReport::compute(&real, &fake, cfg.eval.k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub report: MetricReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub fit: FitReport,
    pub evals: Vec<EvalRecord>,
    pub final_report: MetricReport,
}

fn write_evals(path: &Path, evals: &[EvalRecord], metrics: &[MetricKind]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut head = vec!["step".to_string()];
    head.extend(metrics.iter().map(|m| m.name().to_string()));
    w.write_record(&head)?;
    for e in evals {
        let mut row = vec![e.step.to_string()];
        for m in metrics {
            let v = match m {
                MetricKind::Mmd => e.report.mmd,
                MetricKind::Density => e.report.density,
                MetricKind::Coverage => e.report.coverage,
            };
            row.push(format!("{v:?}"));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains per `cfg`. With `write`, artifacts go to `cfg.out_dir`:
/// `config.ini`, `metrics.csv`, `traces.csv`, `evals.csv`, checkpoints, `report.{json,csv}`.
pub fn train(cfg: &ExperimentConfig, write: bool, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data, cfg.model.likelihood)?;
    let reference = reference_sample(&cfg.data, cfg.model.likelihood)?;
    let mut trainer = build_trainer(cfg, data.dim(), resume)?;
    if write {
        ensure_dir(&cfg.out_dir)?;
        cfg.save(cfg.out_dir.join("config.ini"))?;
    }
    let opts = FitOptions {
        out_dir: write.then(|| cfg.out_dir.clone()),
        checkpoint_every: cfg.checkpoint_every,
        eval_every: cfg.eval.every,
        max_steps: None,
        skip_divergent: cfg.skip_divergent,
    };
    let mut evals = Vec::new();
    let report = fit(&mut trainer, &data.data, &opts, |t, _| {
        evals.push(EvalRecord {
            step: t.step,
            report: evaluate_model(&t.gen, &reference.data, cfg, t.step)?,
        });
        Ok(())
    })?;
    let final_report = match evals.last() {
        Some(e) if e.step == trainer.step => e.report.clone(),
        _ => evaluate_model(&trainer.gen, &reference.data, cfg, trainer.step)?,
    };
    if write {
        write_evals(&cfg.out_dir.join("evals.csv"), &evals, &cfg.eval.metrics)?;
        final_report.save(&cfg.out_dir)?;
    }
    Ok(TrainOutcome {
        trainer,
        fit: report,
        evals,
        final_report,
    })
}

/// Reads a headed CSV of numbers into an `[N, n]` matrix.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                format: "csv",
                offset: i + 2,
                msg: format!("row {}: {e}", i + 2),
            })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Tensor::from_rows(&rows)
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record((0..m.cols()).map(|j| format!("x{j}")))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ancestral samples from a checkpoint: `samples.csv` for vector data,
/// one `sample-NNNN.pgm` per image otherwise.
pub fn sample(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Tensor> {
    let data = load_dataset(&cfg.data, cfg.model.likelihood)?;
    let trainer = build_trainer(cfg, data.dim(), Some(ckpt))?;
    let mut rng = stream(seed, Purpose::Sample, 0, 0);
    let x = trainer.gen.ancestral_sample(count, &mut rng, false)?;
    ensure_dir(out)?;
    match data.image_shape {
        Some((h, w)) => {
            for i in 0..x.rows() {
                write_pgm(out.join(format!("sample-{i:04}.pgm")), w, h, &unit_to_bytes(x.row(i)))?;
            }
        }
        None => write_matrix_csv(out.join("samples.csv"), &x)?,
    }
    Ok(x)
}

/// Metrics between a checkpoint's samples and the reference draw.
pub fn eval_checkpoint(cfg: &ExperimentConfig, ckpt: &Path, seed: u64) -> Result<MetricReport> {
    let reference = reference_sample(&cfg.data, cfg.model.likelihood)?;
    let trainer = build_trainer(cfg, reference.dim(), Some(ckpt))?;
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    evaluate_model(&trainer.gen, &reference.data, &cfg, 0)
}

/// Metrics between two CSV point sets.
pub fn eval_files(real: &Path, fake: &Path, k: usize) -> Result<MetricReport> {
    MetricReport::compute(&read_matrix_csv(real)?, &read_matrix_csv(fake)?, k)
}

fn first_rows(data: &Dataset, count: usize) -> Result<Tensor> {
    if data.len() < count {
        return Err(Error::invalid(format!(
            "requested {count} observations but the dataset has {}",
            data.len()
        )));
    }
    Ok(data.data.select_rows(&(0..count).collect::<Vec<_>>()))
}

/// Runs inference chains on the first `chains` observations, starting where
/// training would start them at the checkpoint's step. Writes `trace.csv`
/// and `trace_summary.csv`.
pub fn trace(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    chains: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ChainTrace> {
    let data = load_dataset(&cfg.data, cfg.model.likelihood)?;
    let trainer = build_trainer(cfg, data.dim(), ckpt)?;
    let x = first_rows(&data, chains)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let (z0, _) = initial_state(&trainer.gen, &trainer.warm, &x, &tc, trainer.step)?;
    let mut target = Posterior {
        model: &trainer.gen,
        x: &x,
    };
    let mut noise = ChainNoise::new(seed, trainer.step, chains);
    let run = run_chain(&mut target, &z0, &tc.sampler, &mut noise)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("trace.csv");
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        run.trace.write_csv(std::io::BufWriter::new(f), 0, true)?;
        let path = dir.join("trace_summary.csv");
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        trace_summary(std::slice::from_ref(&run.trace))?.write_csv(f)?;
    }
    Ok(run.trace)
}

/// One chain on observation `index`, projected onto its leading difference components.
pub fn project(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    index: usize,
    seed: u64,
    opts: &ProjectionOptions,
    out: Option<&Path>,
) -> Result<TrajectoryProjection> {
    let data = load_dataset(&cfg.data, cfg.model.likelihood)?;
    let trainer = build_trainer(cfg, data.dim(), ckpt)?;
    if index >= data.len() {
        return Err(Error::invalid(format!("observation {index} out of range")));
    }
    let x = data.data.select_rows(&[index]);
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let (z0, _) = initial_state(&trainer.gen, &trainer.warm, &x, &tc, trainer.step)?;
    let mut target = Posterior {
        model: &trainer.gen,
        x: &x,
    };
    let mut noise = ChainNoise::new(seed, trainer.step, 1);
    let run = run_chain(&mut target, &z0, &tc.sampler, &mut noise)?;
    let traj = chain_trajectory(&run.samples, 0)?;
    let p = pca_trajectory_projection(&traj, &trainer.gen, &x, opts)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        p.save(dir)?;
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    StepSize,
    Objective,
}

impl Sweep {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step-size" => Ok(Sweep::StepSize),
            "objective" => Ok(Sweep::Objective),
            _ => Err(Error::invalid(format!("unknown sweep `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::StepSize => "step-size",
            Sweep::Objective => "objective",
        }
    }
}

pub const STEP_SIZES: [f64; 4] = [0.001, 0.01, 0.1, 0.5];
pub const PRECOND_DECAYS: [f64; 4] = [0.0, 0.25, 0.9, 0.99];
pub const OBJECTIVES: [Objective; 4] = [
    Objective::Forward,
    Objective::Reverse,
    Objective::Jeffreys,
    Objective::None,
];

/// The swept hyperparameters of one comparison run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub step_size: f64,
    pub precondition: bool,
    pub precond_decay: f64,
    pub objective: Objective,
}

impl Cell {
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.train.sampler.step_size = self.step_size;
        c.train.sampler.precondition = self.precondition;
        c.train.sampler.precond_decay = self.precond_decay;
        c.train.objective = self.objective;
        c.train.seed = seed;
        c.skip_divergent = true;
        c
    }
}

/// For each step size: one unpreconditioned cell, then one per decay.
pub fn step_size_cells(base: &ExperimentConfig, gammas: &[f64], decays: &[f64]) -> Vec<Cell> {
    let s = &base.train.sampler;
    let mut cells = Vec::new();
    for &g in gammas {
        cells.push(Cell {
            step_size: g,
            precondition: false,
            precond_decay: s.precond_decay,
            objective: base.train.objective,
        });
        for &b in decays {
            cells.push(Cell {
                step_size: g,
                precondition: true,
                precond_decay: b,
                objective: base.train.objective,
            });
        }
    }
    cells
}

pub fn objective_cells(base: &ExperimentConfig, objectives: &[Objective]) -> Vec<Cell> {
    let s = &base.train.sampler;
    objectives
        .iter()
        .map(|&o| Cell {
            step_size: s.step_size,
            precondition: s.precondition,
            precond_decay: s.precond_decay,
            objective: o,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub report: MetricReport,
    pub evals: Vec<EvalRecord>,
    pub diverged: usize,
    pub final_elbo: f64,
    /// `‖∇z log p‖` at each step's initial state, in step order.
    pub z0_grad_norm: Vec<f64>,
    pub echo: String,
}

pub fn run_cell(base: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<CellResult> {
    let cfg = cell.apply(base, seed);
    let out = train(&cfg, false, None)?;
    let m = &out.fit.metrics;
    Ok(CellResult {
        cell: *cell,
        seed,
        report: out.final_report,
        evals: out.evals,
        diverged: out.fit.diverged,
        final_elbo: m.iter().rev().find(|m| !m.diverged).map_or(f64::NAN, |m| m.elbo),
        z0_grad_norm: m.iter().map(|m| m.z0_grad_norm).collect(),
        echo: cfg.echo(),
    })
}

/// Number of worker threads: `LPC_NUM_THREADS` when set, otherwise rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("LPC_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs every `(cell, seed)` pair in parallel; results come back in
/// cell-major, seed-minor order regardless of scheduling.
pub fn run_cells(base: &ExperimentConfig, cells: &[Cell], seeds: &[u64]) -> Result<Vec<CellResult>> {
    let jobs: Vec<(Cell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (*c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|(c, s)| run_cell(base, c, *s)).collect())
}

pub const COMPARE_COLUMNS: [&str; 14] = [
    "sweep",
    "seed",
    "step_size",
    "precondition",
    "precond_decay",
    "objective",
    "mmd",
    "density",
    "coverage",
    "diverged_steps",
    "final_elbo",
    "mean_z0_grad_norm",
    "steps",
    "config",
];

pub fn write_comparison(path: &Path, sweep: Sweep, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(COMPARE_COLUMNS)?;
    for r in results {
        let finite: Vec<f64> = r.z0_grad_norm.iter().copied().filter(|v| v.is_finite()).collect();
        let mean_g = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        w.write_record(&[
            sweep.name().to_string(),
            r.seed.to_string(),
            format!("{:?}", r.cell.step_size),
            r.cell.precondition.to_string(),
            format!("{:?}", r.cell.precond_decay),
            r.cell.objective.name().to_string(),
            format!("{:?}", r.report.mmd),
            format!("{:?}", r.report.density),
            format!("{:?}", r.report.coverage),
            r.diverged.to_string(),
            format!("{:?}", r.final_elbo),
            format!("{mean_g:?}"),
            r.z0_grad_norm.len().to_string(),
            r.echo.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The step-size or objective comparison over `seeds`; writes `<out>/compare-<sweep>.csv`.
pub fn compare(
    base: &ExperimentConfig,
    sweep: Sweep,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(Vec<CellResult>, Option<PathBuf>)> {
    let cells = match sweep {
        Sweep::StepSize => step_size_cells(base, &STEP_SIZES, &PRECOND_DECAYS),
        Sweep::Objective => objective_cells(base, &OBJECTIVES),
    };
    let results = run_cells(base, &cells, seeds)?;
    let path = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let p = dir.join(format!("compare-{}.csv", sweep.name()));
            write_comparison(&p, sweep, &results)?;
            Some(p)
        }
        None => None,
    };
    Ok((results, path))
}
