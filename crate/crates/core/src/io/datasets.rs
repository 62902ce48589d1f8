//! Synthetic datasets and IDX image ingestion.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{quantize_pixel, Likelihood};
use crate::rng::{normal_tensor, stream, Purpose};

use super::formats::read_idx;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    /// Isotropic clusters centred on a circle.
    GaussianMixture {
        components: usize,
        radius: f64,
        noise: f64,
    },
    Pinwheel {
        components: usize,
        radial_std: f64,
        tangential_std: f64,
        rate: f64,
    },
    TwoMoons {
        noise: f64,
    },
    /// `x = z W + b + σ ε` with `z ~ N(0, I)` and a seeded ground truth.
    LinearGaussian {
        latent_dim: usize,
        obs_dim: usize,
        noise: f64,
    },
    IdxImages {
        path: PathBuf,
    },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture { .. } => "gaussian-mixture",
            DatasetKind::Pinwheel { .. } => "pinwheel",
            DatasetKind::TwoMoons { .. } => "two-moons",
            DatasetKind::LinearGaussian { .. } => "linear-gaussian",
            DatasetKind::IdxImages { .. } => "idx-images",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Zero mean, unit variance per column (statistics of the training draw).
    Standardize,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Standardize => "standardize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Normalization::None),
            "standardize" => Some(Normalization::Standardize),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Points to generate; for IDX files the number of leading images kept (0 keeps all).
    pub n: usize,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture {
                components: 8,
                radius: 2.0,
                noise: 0.1,
            },
            n: 2000,
            seed: 0,
            normalization: Normalization::None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("data.{name} must be positive")))
            }
        };
        match &self.kind {
            DatasetKind::GaussianMixture { components, radius, noise } => {
                if *components == 0 {
                    return Err(Error::invalid("data.components must be at least 1"));
                }
                positive("noise", *noise)?;
                if !(*radius >= 0.0) {
                    return Err(Error::invalid("data.radius must be non-negative"));
                }
            }
            DatasetKind::Pinwheel { components, radial_std, tangential_std, rate } => {
                if *components == 0 {
                    return Err(Error::invalid("data.components must be at least 1"));
                }
                positive("radial_std", *radial_std)?;
                positive("tangential_std", *tangential_std)?;
                positive("rate", *rate)?;
            }
            DatasetKind::TwoMoons { noise } => positive("noise", *noise)?,
            DatasetKind::LinearGaussian { latent_dim, obs_dim, noise } => {
                if *latent_dim == 0 || *obs_dim == 0 {
                    return Err(Error::invalid("data dimensions must be at least 1"));
                }
                positive("noise", *noise)?;
            }
            DatasetKind::IdxImages { .. } => {}
        }
        Ok(())
    }
}

/// Ground truth of a linear-Gaussian dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTruth {
    /// `[d, n]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, n]`
    pub data: Tensor,
    /// `(height, width)` for image data.
    pub image_shape: Option<(usize, usize)>,
    pub truth: Option<LinearTruth>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn linear_truth(seed: u64, d: usize, n: usize, noise: f64) -> LinearTruth {
    let mut rng = stream(seed, Purpose::Data, 1, 0);
    let weight = normal_tensor(&mut rng, &[d, n]);
    let bias = normal_tensor(&mut rng, &[n]).map(|v| 0.5 * v);
    LinearTruth { weight, bias, noise }
}

/// Draws the raw points of a synthetic dataset from lane `lane`.
fn synthesize(spec: &DatasetSpec, lane: u64) -> Result<(Tensor, Option<LinearTruth>)> {
    let n = spec.n;
    let mut rng = stream(spec.seed, Purpose::Data, 0, lane);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut truth = None;
    match &spec.kind {
        DatasetKind::GaussianMixture { components, radius, noise } => {
            for _ in 0..n {
                let k = rng.random_range(0..*components);
                let a = 2.0 * PI * k as f64 / *components as f64;
                let (ex, ey) = (normal(&mut rng), normal(&mut rng));
                rows.push(vec![radius * a.cos() + noise * ex, radius * a.sin() + noise * ey]);
            }
        }
        DatasetKind::Pinwheel { components, radial_std, tangential_std, rate } => {
            for _ in 0..n {
                let k = rng.random_range(0..*components);
                let r = 1.0 + radial_std * normal(&mut rng);
                let t = tangential_std * normal(&mut rng);
                let a = 2.0 * PI * k as f64 / *components as f64 + rate * r.exp();
                let (s, c) = a.sin_cos();
                rows.push(vec![c * r - s * t, s * r + c * t]);
            }
        }
        DatasetKind::TwoMoons { noise } => {
            for _ in 0..n {
                let upper = rng.random_bool(0.5);
                let t = PI * rng.random::<f64>();
                let (x, y) = if upper {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                rows.push(vec![x + noise * normal(&mut rng), y + noise * normal(&mut rng)]);
            }
        }
        DatasetKind::LinearGaussian { latent_dim, obs_dim, noise } => {
            let tr = linear_truth(spec.seed, *latent_dim, *obs_dim, *noise);
            for _ in 0..n {
                let z: Vec<f64> = (0..*latent_dim).map(|_| normal(&mut rng)).collect();
                let row = (0..*obs_dim)
                    .map(|j| {
                        let mean: f64 = tr.bias.data()[j]
                            + (0..*latent_dim).map(|i| z[i] * tr.weight.get2(i, j)).sum::<f64>();
                        mean + noise * normal(&mut rng)
                    })
                    .collect();
                rows.push(row);
            }
            truth = Some(tr);
        }
        DatasetKind::IdxImages { .. } => unreachable!("handled by load_dataset"),
    }
    Ok((Tensor::from_rows(&rows)?, truth))
}

fn standardize(data: &mut Tensor, stats_from: &Tensor) {
    let (n, d) = (stats_from.rows() as f64, stats_from.cols());
    for j in 0..d {
        let mean = (0..stats_from.rows()).map(|i| stats_from.get2(i, j)).sum::<f64>() / n;
        let var = (0..stats_from.rows())
            .map(|i| (stats_from.get2(i, j) - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..data.rows() {
            let v = &mut data.row_mut(i)[j];
            *v = (*v - mean) / sd;
        }
    }
}

fn load(spec: &DatasetSpec, likelihood: Likelihood, lane: u64) -> Result<Dataset> {
    spec.validate()?;
    let (mut data, image_shape, truth) = match &spec.kind {
        DatasetKind::IdxImages { path } => {
            let idx = read_idx(path)?;
            let shape = match idx.dims.as_slice() {
                [_, h, w] => Some((*h, *w)),
                _ => None,
            };
            let mut t = idx.to_unit_rows()?;
            if spec.n > 0 && spec.n < t.rows() {
                t = t.select_rows(&(0..spec.n).collect::<Vec<_>>());
            }
            (t, shape, None)
        }
        _ => {
            if spec.n == 0 {
                return Err(Error::EmptyDataset);
            }
            let (t, truth) = synthesize(spec, lane)?;
            (t, None, truth)
        }
    };
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if spec.normalization == Normalization::Standardize {
        let stats = if lane == 0 {
            data.clone()
        } else {
            synthesize(spec, 0)?.0
        };
        standardize(&mut data, &stats);
    }
    if likelihood == Likelihood::DiscretizedGaussian {
        for v in data.data_mut() {
            *v = quantize_pixel(*v);
        }
    }
    Ok(Dataset {
        data,
        image_shape,
        truth,
    })
}

/// Training data in a deterministic (pre-shuffle) order. Values are snapped
/// to the 256-level grid when the discretized likelihood is selected.
pub fn load_dataset(spec: &DatasetSpec, likelihood: Likelihood) -> Result<Dataset> {
    load(spec, likelihood, 0)
}

/// An independent draw of the same distribution for evaluation; for IDX
/// files, the training images themselves.
pub fn reference_sample(spec: &DatasetSpec, likelihood: Likelihood) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::IdxImages { .. } => load(spec, likelihood, 0),
        _ => load(spec, likelihood, 1),
    }
}
