//! Sample-quality metrics, chain diagnostics and closed-form oracles.

mod oracle;
mod projection;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use oracle::{linear_gaussian_log_evidence, linear_gaussian_posterior, GaussianPosterior};
pub use projection::{
    chain_trajectory, pca_trajectory_projection, project_trajectory, ProjectionOptions,
    TrajectoryProjection,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::sampler::ChainTrace;

/// Smallest k-NN radius used for density and coverage.
pub const RADIUS_FLOOR: f64 = 1e-12;

fn check_points(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.rank() != 2 || fake.rank() != 2 || real.cols() != fake.cols() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from each real point to its `k`-th nearest other real point,
/// floored at [`RADIUS_FLOOR`]; also returns how many radii were floored.
pub fn knn_radii(real: &Tensor, k: usize) -> Result<(Vec<f64>, usize)> {
    let n = real.rows();
    if k == 0 || n < k + 1 {
        return Err(Error::invalid(format!(
            "k-NN radii need k >= 1 and at least k + 1 points (k = {k}, n = {n})"
        )));
    }
    let mut floored = 0;
    let radii = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(real.row(i), real.row(j)).sqrt())
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let r = d[k - 1];
            if r < RADIUS_FLOOR {
                floored += 1;
                RADIUS_FLOOR
            } else {
                r
            }
        })
        .collect();
    Ok((radii, floored))
}

/// Density and coverage of `fake` against the k-NN balls of `real`.
/// A point on a ball's boundary counts as inside.
pub fn density_coverage(real: &Tensor, fake: &Tensor, k: usize) -> Result<(f64, f64)> {
    check_points(real, fake)?;
    if fake.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let (radii, floored) = knn_radii(real, k)?;
    if floored > 0 {
        log::warn!("{floored} duplicate real points: k-NN radius floored at {RADIUS_FLOOR:e}");
    }
    let mut inside = 0usize;
    let mut covered = vec![false; real.rows()];
    for j in 0..fake.rows() {
        for (i, (&r, c)) in radii.iter().zip(covered.iter_mut()).enumerate() {
            if sq_dist(fake.row(j), real.row(i)).sqrt() <= r {
                inside += 1;
                *c = true;
            }
        }
    }
    let density = inside as f64 / (k * fake.rows()) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.rows() as f64;
    Ok((density, coverage))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

/// Median of all pairwise distances in the pooled sample.
pub fn median_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_points(a, b)?;
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    // Same value as `quantile_sorted(sorted, 0.5)` without a full sort.
    let (lo, hi) = ((d.len() - 1) / 2, d.len() / 2);
    let (left, &mut upper, _) = d.select_nth_unstable_by(hi, f64::total_cmp);
    let lower = if lo == hi {
        upper
    } else {
        left.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(lower + 0.5 * (upper - lower))
}

/// Unbiased estimate of MMD² under `k(a, b) = exp(−‖a − b‖² / (2h²))`;
/// may be negative.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    check_points(x, y)?;
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::invalid("unbiased MMD needs at least two points per sample"));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => median_distance(x, y)?,
    };
    if !(h > 0.0) {
        return Err(Error::invalid("kernel bandwidth must be positive"));
    }
    let c = -0.5 / (h * h);
    let within = |t: &Tensor| {
        let mut s = 0.0;
        for i in 0..t.rows() {
            for j in i + 1..t.rows() {
                s += (c * sq_dist(t.row(i), t.row(j))).exp();
            }
        }
        2.0 * s / (t.rows() * (t.rows() - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += (c * sq_dist(x.row(i), y.row(j))).exp();
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (n * m) as f64)
}

/// [`mmd2_unbiased`] clamped at 0 for reporting.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd2_unbiased(x, y, bandwidth)?.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub density: f64,
    pub coverage: f64,
    pub mmd: f64,
    pub bandwidth: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub k: usize,
}

impl MetricReport {
    /// Density/coverage with `k` and MMD with the median-heuristic bandwidth.
    pub fn compute(real: &Tensor, fake: &Tensor, k: usize) -> Result<Self> {
        let (density, coverage) = density_coverage(real, fake, k)?;
        let h = median_distance(real, fake)?;
        let h = if h > 0.0 { h } else { 1.0 };
        Ok(MetricReport {
            density,
            coverage,
            mmd: mmd_rbf(real, fake, Bandwidth::Fixed(h))?,
            bandwidth: h,
            n_real: real.rows(),
            n_fake: fake.rows(),
            k,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("report.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)
    }
}

/// Type-7 (linear interpolation) quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 5/50/95% quantiles of one quantity at one step index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let mut s = values.to_vec();
        s.sort_unstable_by(f64::total_cmp);
        Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q05: quantile_sorted(&s, 0.05),
            q50: quantile_sorted(&s, 0.5),
            q95: quantile_sorted(&s, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub logp: Vec<Spread>,
    pub delta_logp: Vec<Spread>,
    pub grad_norm: Vec<Spread>,
}

/// Per-step statistics across the chains of one or more traces.
pub fn trace_summary(traces: &[ChainTrace]) -> Result<TraceSummary> {
    let chains: Vec<_> = traces.iter().flat_map(|t| t.chains.iter()).collect();
    let len = chains.first().map(|c| c.len()).ok_or(Error::EmptyDataset)?;
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("trace summary needs equal-length traces"));
    }
    let column = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Spread> {
        (0..len)
            .map(|t| Spread::of(&(0..chains.len()).map(|c| f(c, t)).collect::<Vec<_>>()))
            .collect()
    };
    Ok(TraceSummary {
        logp: column(&|c, t| chains[c].logp[t]),
        delta_logp: column(&|c, t| chains[c].delta_logp[t]),
        grad_norm: column(&|c, t| chains[c].grad_norm[t]),
    })
}

impl TraceSummary {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        for q in ["logp", "delta_logp", "grad_norm"] {
            for s in ["mean", "q05", "q50", "q95"] {
                header.push(format!("{q}_{s}"));
            }
        }
        w.write_record(&header)?;
        for t in 0..self.logp.len() {
            let mut row = vec![t.to_string()];
            for s in [&self.logp[t], &self.delta_logp[t], &self.grad_norm[t]] {
                row.extend([s.mean, s.q05, s.q50, s.q95].iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }
}
