//! `lpc`: train, sample, evaluate and inspect Langevin predictive coding models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lpc_core::eval::ProjectionOptions;
use lpc_core::io::experiment::{self, Sweep};
use lpc_core::io::ExperimentConfig;

#[derive(Parser)]
#[command(name = "lpc", version, about = "Langevin predictive coding")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the command (overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `experiment.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model, writing metrics, traces, checkpoints and a metric report.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw ancestral samples (PGM for images, CSV otherwise).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Density, coverage and MMD for a checkpoint or two CSV point sets.
    Eval {
        #[arg(long, conflicts_with_all = ["real", "fake"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "fake")]
        real: Option<PathBuf>,
        #[arg(long, requires = "real")]
        fake: Option<PathBuf>,
        /// Neighbourhood size; defaults to `experiment.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run inference chains on the first observations and export their traces.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        chains: usize,
    },
    /// Project one chain's trajectory onto its leading difference components.
    Project {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Observation to infer.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long)]
        unit_variance: bool,
    },
    /// Step-size or warm-start objective comparison over several seeds.
    Compare {
        /// `step-size` or `objective`.
        #[arg(long)]
        sweep: String,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Trace { .. } => "trace",
            Command::Project { .. } => "project",
            Command::Compare { .. } => "compare",
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli, out: &Path) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let seed = cfg.train.seed;
    match &cli.command {
        Command::Train { resume } => {
            cfg.out_dir = out.to_path_buf();
            let o = experiment::train(&cfg, true, resume.as_deref())?;
            if o.fit.diverged > 0 {
                log::warn!("{} steps diverged and were skipped", o.fit.diverged);
            }
            println!("{}", o.final_report.to_json()?);
        }
        Command::Sample { checkpoint, count } => {
            let x = experiment::sample(&cfg, checkpoint, *count, seed, out)?;
            println!("wrote {} samples to {}", x.rows(), out.display());
        }
        Command::Eval { checkpoint, real, fake, k } => {
            let k = k.unwrap_or(cfg.eval.k);
            let report = match (checkpoint, real, fake) {
                (Some(c), _, _) => {
                    cfg.eval.k = k;
                    experiment::eval_checkpoint(&cfg, c, seed)?
                }
                (None, Some(r), Some(f)) => experiment::eval_files(r, f, k)?,
                _ => bail!("eval needs --checkpoint or both --real and --fake"),
            };
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            report.save(out)?;
            println!("{}", report.to_json()?);
        }
        Command::Trace { checkpoint, chains } => {
            let trace = experiment::trace(&cfg, checkpoint.as_deref(), *chains, seed, Some(out))?;
            println!("traced {} chains of {} steps", trace.chains.len(), cfg.train.sampler.steps);
        }
        Command::Project { checkpoint, index, grid, margin, unit_variance } => {
            let opts = ProjectionOptions {
                grid_res: *grid,
                margin: *margin,
                unit_variance: *unit_variance,
            };
            let p = experiment::project(&cfg, checkpoint.as_deref(), *index, seed, &opts, Some(out))?;
            println!("explained variance {:?} {:?}", p.explained[0], p.explained[1]);
        }
        Command::Compare { sweep, seeds } => {
            let sweep = Sweep::parse(sweep)?;
            let list: Vec<u64> = (seed..seed + seeds).collect();
            let (results, path) = experiment::compare(&cfg, sweep, &list, Some(out))?;
            let path = path.expect("output directory given");
            println!("{} rows written to {}", results.len(), path.display());
        }
    }
    Ok(())
}

fn output_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(o) = &cli.common.out {
        return Ok(o.clone());
    }
    let cfg = load_config(&cli.common)?;
    Ok(match cli.command {
        Command::Train { .. } => cfg.out_dir,
        _ => cfg.out_dir.join(cli.command.name()),
    })
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

/// Leaves a marker next to whatever a failed command managed to write.
fn flag_partial(out: &Path, err: &anyhow::Error) {
    if out.is_dir() {
        let _ = std::fs::write(out.join("PARTIAL"), format!("{}\n", describe(err)));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = output_dir(&cli).and_then(|out| {
        let _ = std::fs::remove_file(out.join("PARTIAL"));
        run(&cli, &out).inspect_err(|e| flag_partial(&out, e))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
