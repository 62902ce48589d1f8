use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::formats::{heatmap_bytes, write_pgm};
use crate::models::GenerativeModel;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionOptions {
    pub grid_res: usize,
    /// Fractional padding of the bounding box on each side.
    pub margin: f64,
    /// Express coordinates in units of each component's standard deviation.
    pub unit_variance: bool,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            grid_res: 50,
            margin: 0.2,
            unit_variance: false,
        }
    }
}

/// A latent trajectory seen in the plane of its two leading difference
/// components, with the negative log joint over that plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProjection {
    /// `[T, 2]`; the last row is the origin.
    pub points: Tensor,
    /// `[2, d]`, orthonormal rows.
    pub components: Tensor,
    pub explained: [f64; 2],
    /// Nonzero eigenvalues among the two kept components.
    pub rank: usize,
    pub axis_a: Vec<f64>,
    pub axis_b: Vec<f64>,
    /// `[res, res]`; entry `(i, j)` sits at `(axis_a[j], axis_b[i])`.
    pub grid: Tensor,
}

/// Rows `chain` of each `[chains, d]` state, stacked to `[T, d]`.
pub fn chain_trajectory(states: &[Tensor], chain: usize) -> Result<Tensor> {
    let rows: Vec<&[f64]> = states
        .iter()
        .map(|s| {
            if chain < s.rows() {
                Ok(s.row(chain))
            } else {
                Err(Error::invalid(format!("chain {chain} out of range")))
            }
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Projects `trajectory` (`[T, d]`) onto the top two eigenvectors of
/// `Σ_t (z⁽ᵗ⁾ − z⁽ᵀ⁾)(z⁽ᵗ⁾ − z⁽ᵀ⁾)ᵀ / (T − 1)`. No centring is applied beyond
/// the differencing. `neg_log_joint` maps a `[k, d]` batch of latents to
/// their `−log p(x, z)`.
pub fn project_trajectory<F>(
    trajectory: &Tensor,
    mut neg_log_joint: F,
    opts: &ProjectionOptions,
) -> Result<TrajectoryProjection>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    if trajectory.rank() != 2 || trajectory.rows() < 3 || trajectory.cols() < 2 {
        return Err(Error::invalid("projection needs T >= 3 states of dimension d >= 2"));
    }
    if opts.grid_res < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    let (t, d) = (trajectory.rows(), trajectory.cols());
    let last = trajectory.row(t - 1).to_vec();
    let diffs = DMatrix::from_fn(t - 1, d, |i, j| trajectory.get2(i, j) - last[j]);
    let cov = diffs.transpose() * &diffs / (t - 1) as f64;
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut comps = Vec::with_capacity(2 * d);
    let mut explained = [0.0; 2];
    let mut sd = [1.0; 2];
    let mut rank = 0;
    for (k, &idx) in order.iter().take(2).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Sign convention: largest-magnitude entry positive.
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.extend(v);
        if top > 0.0 && lam > RANK_TOL * top {
            rank += 1;
            explained[k] = lam / total;
            if opts.unit_variance {
                sd[k] = lam.sqrt();
            }
        }
    }
    if rank < 2 {
        log::warn!("trajectory differences have rank {rank}; padding with null-space directions");
    }
    let components = Tensor::new([2, d], comps)?;

    let mut points = Vec::with_capacity(2 * t);
    for i in 0..t {
        for k in 0..2 {
            let dot: f64 = (0..d)
                .map(|j| (trajectory.get2(i, j) - last[j]) * components.get2(k, j))
                .sum();
            points.push(dot / sd[k]);
        }
    }
    let points = Tensor::new([t, 2], points)?;

    let axis = |k: usize| -> Vec<f64> {
        let vals: Vec<f64> = (0..t).map(|i| points.get2(i, k)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { opts.margin * (hi - lo) } else { 1.0 };
        let (lo, hi) = (lo - pad, hi + pad);
        let r = opts.grid_res;
        (0..r).map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64).collect()
    };
    let axis_a = axis(0);
    let axis_b = axis(1);

    let r = opts.grid_res;
    let mut lattice = Vec::with_capacity(r * r * d);
    for &b in &axis_b {
        for &a in &axis_a {
            for j in 0..d {
                lattice.push(
                    last[j] + a * sd[0] * components.get2(0, j) + b * sd[1] * components.get2(1, j),
                );
            }
        }
    }
    let values = neg_log_joint(&Tensor::new([r * r, d], lattice)?)?;
    if values.len() != r * r {
        return Err(Error::invalid("landscape evaluator returned the wrong count"));
    }
    let grid = Tensor::new([r, r], values)?;
    if !grid.is_finite() {
        return Err(Error::NumericFault { op: "projection_grid" });
    }
    Ok(TrajectoryProjection {
        points,
        components,
        explained,
        rank,
        axis_a,
        axis_b,
        grid,
    })
}

/// [`project_trajectory`] over the model's negative log joint with one observation `x` (`[n]` or `[1, n]`).
pub fn pca_trajectory_projection(
    trajectory: &Tensor,
    model: &GenerativeModel,
    x: &Tensor,
    opts: &ProjectionOptions,
) -> Result<TrajectoryProjection> {
    let x = x.reshape([1, x.len()])?;
    project_trajectory(
        trajectory,
        |z: &Tensor| {
            let rows = vec![0; z.rows()];
            let xs = x.select_rows(&rows);
            let e = model.joint_eval(&xs, z, false)?;
            Ok(e.per_example.iter().map(|v| -v).collect())
        },
        opts,
    )
}

impl TrajectoryProjection {
    /// Writes `trajectory.csv`, `grid.csv`, `components.csv` and `grid.pgm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, body: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            body(&mut buf).map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        };
        write("trajectory.csv", &|w| {
            writeln!(w, "step,pc1,pc2")?;
            for i in 0..self.points.rows() {
                writeln!(w, "{},{:?},{:?}", i + 1, self.points.get2(i, 0), self.points.get2(i, 1))?;
            }
            Ok(())
        })?;
        write("grid.csv", &|w| {
            let head: Vec<String> = self.axis_a.iter().map(|a| format!("{a:?}")).collect();
            writeln!(w, "pc2\\pc1,{}", head.join(","))?;
            for (i, b) in self.axis_b.iter().enumerate() {
                let row: Vec<String> =
                    self.grid.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{b:?},{}", row.join(","))?;
            }
            Ok(())
        })?;
        write("components.csv", &|w| {
            writeln!(w, "component,explained,{}", (0..self.components.cols()).map(|j| format!("z{j}")).collect::<Vec<_>>().join(","))?;
            for k in 0..2 {
                let row: Vec<String> =
                    self.components.row(k).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{},{:?},{}", k + 1, self.explained[k], row.join(","))?;
            }
            Ok(())
        })?;
        // Image rows run top to bottom, so flip the b axis.
        let r = self.axis_b.len();
        let flipped: Vec<f64> = (0..r).rev().flat_map(|i| self.grid.row(i).to_vec()).collect();
        write_pgm(dir.join("grid.pgm"), self.axis_a.len(), r, &heatmap_bytes(&flipped))
    }
}
