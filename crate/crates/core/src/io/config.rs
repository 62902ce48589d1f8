//! Experiment configuration in a line-oriented `key = value` format.
//!
//! ```text
//! # comment
//! [train]
//! learning_rate = 0.001
//! objective = jeffreys
//! [sampler]
//! step_size = 0.1
//! ```
//!
//! Sections are `experiment`, `data`, `model`, `train` and `sampler`. Every
//! key is optional and falls back to its default; unknown sections or keys
//! are errors. Floats are written in shortest round-trip form, so a written
//! config re-parses to an equal value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{DecoderScale, Likelihood};
use crate::sampler::NoiseCovariance;
use crate::trainer::{Method, Objective, TrainConfig};

use super::datasets::{DatasetKind, DatasetSpec, Normalization};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub likelihood: Likelihood,
    pub decoder_scale: DecoderScale,
    pub prior_variance: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            latent_dim: 2,
            hidden: vec![32, 32],
            encoder_hidden: vec![32],
            likelihood: Likelihood::Gaussian,
            decoder_scale: DecoderScale::Global,
            prior_variance: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Mmd,
    Density,
    Coverage,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mmd => "mmd",
            MetricKind::Density => "density",
            MetricKind::Coverage => "coverage",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    /// Evaluate every this many training steps (and always at the end).
    pub every: Option<u64>,
    /// Model samples and reference points per evaluation.
    pub samples: usize,
    pub k: usize,
    pub metrics: Vec<MetricKind>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            every: None,
            samples: 500,
            k: 5,
            metrics: vec![MetricKind::Mmd, MetricKind::Density, MetricKind::Coverage],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub checkpoint_every: Option<u64>,
    pub skip_divergent: bool,
    pub eval: EvalSpec,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: None,
            skip_divergent: false,
            eval: EvalSpec::default(),
            data: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Raw `section.key → value` table with line numbers.
struct Table {
    entries: IndexMap<(String, String), Entry>,
}

const SECTIONS: [&str; 5] = ["experiment", "data", "model", "train", "sampler"];

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(line, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            let sec = section
                .clone()
                .ok_or_else(|| config_err(line, "key outside of any section"))?;
            let key = (sec, k.trim().to_string());
            if entries.contains_key(&key) {
                return Err(config_err(line, format!("duplicate key `{}`", key.1)));
            }
            entries.insert(
                key,
                Entry {
                    value: v.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Table { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.entries
            .shift_remove(&(section.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        self.get_with(section, key, default, |s| s.parse::<T>().ok())
    }

    fn get_with<T>(
        &mut self,
        section: &str,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> Option<T>,
    ) -> Result<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some(e) => parse(&e.value).ok_or_else(|| {
                config_err(e.line, format!("invalid value `{}` for {section}.{key}", e.value))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some(((sec, key), e)) => Err(config_err(e.line, format!("unknown key {sec}.{key}"))),
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_opt<T: FromStr>(s: &str) -> Option<Option<T>> {
    if s == "none" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

fn fmt_opt<T: std::fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| format!("{x:?}"))
}

pub fn likelihood_name(l: Likelihood) -> &'static str {
    match l {
        Likelihood::Gaussian => "gaussian",
        Likelihood::DiscretizedGaussian => "discretized-gaussian",
    }
}

fn parse_likelihood(s: &str) -> Option<Likelihood> {
    match s {
        "gaussian" => Some(Likelihood::Gaussian),
        "discretized-gaussian" => Some(Likelihood::DiscretizedGaussian),
        _ => None,
    }
}

fn scale_name(s: DecoderScale) -> String {
    match s {
        DecoderScale::Global => "global".into(),
        DecoderScale::PerOutput => "per-output".into(),
        DecoderScale::Fixed(v) => format!("fixed:{v:?}"),
    }
}

fn parse_scale(s: &str) -> Option<DecoderScale> {
    match s {
        "global" => Some(DecoderScale::Global),
        "per-output" => Some(DecoderScale::PerOutput),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse().ok())
            .map(DecoderScale::Fixed),
    }
}

fn noise_cov_name(n: NoiseCovariance) -> &'static str {
    match n {
        NoiseCovariance::InverseMhat => "inverse_mhat",
        NoiseCovariance::Mhat => "mhat",
    }
}

fn parse_noise_cov(s: &str) -> Option<NoiseCovariance> {
    match s {
        "inverse_mhat" => Some(NoiseCovariance::InverseMhat),
        "mhat" => Some(NoiseCovariance::Mhat),
        _ => None,
    }
}

fn parse_metrics(s: &str) -> Option<Vec<MetricKind>> {
    s.split(',')
        .map(|m| match m.trim() {
            "mmd" => Some(MetricKind::Mmd),
            "density" => Some(MetricKind::Density),
            "coverage" => Some(MetricKind::Coverage),
            _ => None,
        })
        .collect()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "yes" => Some(true),
        "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Table::parse(text)?;
        let d = ExperimentConfig::default();

        let out_dir = t.get_with("experiment", "out_dir", d.out_dir, |s| Some(PathBuf::from(s)))?;
        let checkpoint_every = t.get_with("experiment", "checkpoint_every", None, parse_opt)?;
        let skip_divergent = t.get_with("experiment", "skip_divergent", false, parse_bool)?;
        let eval = EvalSpec {
            every: t.get_with("experiment", "eval_every", d.eval.every, parse_opt)?,
            samples: t.get("experiment", "eval_samples", d.eval.samples)?,
            k: t.get("experiment", "k", d.eval.k)?,
            metrics: t.get_with("experiment", "metrics", d.eval.metrics, parse_metrics)?,
        };

        let data = parse_data(&mut t)?;

        let model = ModelSpec {
            latent_dim: t.get("model", "latent_dim", d.model.latent_dim)?,
            hidden: t.get_with("model", "hidden", d.model.hidden, parse_list)?,
            encoder_hidden: t.get_with("model", "encoder_hidden", d.model.encoder_hidden, parse_list)?,
            likelihood: t.get_with("model", "likelihood", d.model.likelihood, parse_likelihood)?,
            decoder_scale: t.get_with("model", "decoder_scale", d.model.decoder_scale, parse_scale)?,
            prior_variance: t.get("model", "prior_variance", d.model.prior_variance)?,
        };

        let dt = d.train;
        let ds = dt.sampler.clone();
        let mut train = TrainConfig {
            method: t.get_with("train", "method", dt.method, |s| Method::parse(s).ok())?,
            learning_rate: t.get("train", "learning_rate", dt.learning_rate)?,
            batch_size: t.get("train", "batch_size", dt.batch_size)?,
            objective: t.get_with("train", "objective", dt.objective, |s| Objective::parse(s).ok())?,
            prior_init_batches: t.get("train", "prior_init_batches", dt.prior_init_batches)?,
            epochs: t.get("train", "epochs", dt.epochs)?,
            seed: t.get("train", "seed", dt.seed)?,
            adam_beta1: t.get("train", "adam_beta1", dt.adam_beta1)?,
            adam_beta2: t.get("train", "adam_beta2", dt.adam_beta2)?,
            adam_eps: t.get("train", "adam_eps", dt.adam_eps)?,
            grad_clip: t.get_with("train", "grad_clip", dt.grad_clip, parse_opt)?,
            burn_in: t.get("train", "burn_in", dt.burn_in)?,
            trace_chains: t.get("train", "trace_chains", dt.trace_chains)?,
            sampler: ds.clone(),
        };
        train.sampler.step_size = t.get("sampler", "step_size", ds.step_size)?;
        train.sampler.steps = t.get("sampler", "steps", ds.steps)?;
        train.sampler.precondition = t.get_with("sampler", "precondition", ds.precondition, parse_bool)?;
        train.sampler.precond_decay = t.get("sampler", "precond_decay", ds.precond_decay)?;
        train.sampler.noise_scale = t.get("sampler", "noise_scale", ds.noise_scale)?;
        train.sampler.noise_cov = t.get_with("sampler", "noise_cov", ds.noise_cov, parse_noise_cov)?;
        t.finish()?;

        let cfg = ExperimentConfig {
            out_dir,
            checkpoint_every,
            skip_divergent,
            eval,
            data,
            model,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.latent_dim == 0 {
            return Err(Error::invalid("model.latent_dim must be at least 1"));
        }
        if !(self.model.prior_variance > 0.0) {
            return Err(Error::invalid("model.prior_variance must be positive"));
        }
        if self.eval.k == 0 || self.eval.samples <= self.eval.k {
            return Err(Error::invalid("experiment.eval_samples must exceed k >= 1"));
        }
        self.data.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("[experiment]", String::new());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", fmt_opt(&self.checkpoint_every));
        kv("skip_divergent", self.skip_divergent.to_string());
        kv("eval_every", fmt_opt(&self.eval.every));
        kv("eval_samples", self.eval.samples.to_string());
        kv("k", self.eval.k.to_string());
        kv(
            "metrics",
            self.eval.metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        );

        kv("[data]", String::new());
        let d = &self.data;
        kv("kind", d.kind.name().into());
        kv("n", d.n.to_string());
        kv("seed", d.seed.to_string());
        kv("normalization", d.normalization.name().into());
        match &d.kind {
            DatasetKind::GaussianMixture { components, radius, noise } => {
                kv("components", components.to_string());
                kv("radius", format!("{radius:?}"));
                kv("noise", format!("{noise:?}"));
            }
            DatasetKind::Pinwheel { components, radial_std, tangential_std, rate } => {
                kv("components", components.to_string());
                kv("radial_std", format!("{radial_std:?}"));
                kv("tangential_std", format!("{tangential_std:?}"));
                kv("rate", format!("{rate:?}"));
            }
            DatasetKind::TwoMoons { noise } => kv("noise", format!("{noise:?}")),
            DatasetKind::LinearGaussian { latent_dim, obs_dim, noise } => {
                kv("latent_dim", latent_dim.to_string());
                kv("obs_dim", obs_dim.to_string());
                kv("noise", format!("{noise:?}"));
            }
            DatasetKind::IdxImages { path } => kv("path", path.display().to_string()),
        }

        kv("[model]", String::new());
        let m = &self.model;
        kv("latent_dim", m.latent_dim.to_string());
        kv("hidden", fmt_list(&m.hidden));
        kv("encoder_hidden", fmt_list(&m.encoder_hidden));
        kv("likelihood", likelihood_name(m.likelihood).into());
        kv("decoder_scale", scale_name(m.decoder_scale));
        kv("prior_variance", format!("{:?}", m.prior_variance));

        kv("[train]", String::new());
        let t = &self.train;
        kv("method", t.method.name().into());
        kv("learning_rate", format!("{:?}", t.learning_rate));
        kv("batch_size", t.batch_size.to_string());
        kv("objective", t.objective.name().into());
        kv("prior_init_batches", t.prior_init_batches.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("adam_beta1", format!("{:?}", t.adam_beta1));
        kv("adam_beta2", format!("{:?}", t.adam_beta2));
        kv("adam_eps", format!("{:?}", t.adam_eps));
        kv("grad_clip", fmt_opt(&t.grad_clip));
        kv("burn_in", format!("{:?}", t.burn_in));
        kv("trace_chains", t.trace_chains.to_string());

        kv("[sampler]", String::new());
        let p = &t.sampler;
        kv("step_size", format!("{:?}", p.step_size));
        kv("steps", p.steps.to_string());
        kv("precondition", p.precondition.to_string());
        kv("precond_decay", format!("{:?}", p.precond_decay));
        kv("noise_scale", format!("{:?}", p.noise_scale));
        kv("noise_cov", noise_cov_name(p.noise_cov).into());
        // Section headers were emitted as `[name] = `; trim the suffix.
        s.replace("] = \n", "]\n")
    }

    /// The config on one line (`section.key=value;…`) for embedding in CSV rows.
    pub fn echo(&self) -> String {
        let mut section = String::new();
        let mut parts = Vec::new();
        for line in self.to_text().lines() {
            if let Some(name) = line.strip_prefix('[') {
                section = name.trim_end_matches(']').to_string();
            } else if let Some((k, v)) = line.split_once(" = ") {
                parts.push(format!("{section}.{k}={v}"));
            }
        }
        parts.join(";")
    }
}

fn parse_data(t: &mut Table) -> Result<DatasetSpec> {
    let d = DatasetSpec::default();
    let (kind_name, kind_line) = match t.take("data", "kind") {
        Some(e) => (e.value, e.line),
        None => (d.kind.name().to_string(), 0),
    };
    let n = t.get("data", "n", d.n)?;
    let seed = t.get("data", "seed", d.seed)?;
    let normalization =
        t.get_with("data", "normalization", d.normalization, Normalization::parse)?;
    let kind = match kind_name.as_str() {
        "gaussian-mixture" => DatasetKind::GaussianMixture {
            components: t.get("data", "components", 8)?,
            radius: t.get("data", "radius", 2.0)?,
            noise: t.get("data", "noise", 0.1)?,
        },
        "pinwheel" => DatasetKind::Pinwheel {
            components: t.get("data", "components", 5)?,
            radial_std: t.get("data", "radial_std", 0.3)?,
            tangential_std: t.get("data", "tangential_std", 0.1)?,
            rate: t.get("data", "rate", 0.25)?,
        },
        "two-moons" => DatasetKind::TwoMoons {
            noise: t.get("data", "noise", 0.1)?,
        },
        "linear-gaussian" => DatasetKind::LinearGaussian {
            latent_dim: t.get("data", "latent_dim", 4)?,
            obs_dim: t.get("data", "obs_dim", 8)?,
            noise: t.get("data", "noise", 0.1)?,
        },
        "idx-images" => DatasetKind::IdxImages {
            path: t.get_with("data", "path", PathBuf::new(), |s| Some(PathBuf::from(s)))?,
        },
        other => return Err(config_err(kind_line, format!("unknown dataset kind `{other}`"))),
    };
    Ok(DatasetSpec {
        kind,
        n,
        seed,
        normalization,
    })
}
