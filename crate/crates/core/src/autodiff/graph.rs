//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every primitive pushes a
//! node holding its forward value and the indices of its inputs, so node
//! indices are already a topological order: the backward sweep walks the
//! arena from the output towards the leaves and touches each node once.
//!
//! Gradients of leaves accumulate across calls to [`Graph::backward`] until
//! [`Graph::zero_grad`] is called. Intermediate gradients are transient.

use super::special;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-width of one bin on the 256-level `[0, 1]` pixel grid.
pub const PIXEL_HALF_BIN: f64 = 1.0 / 510.0;
/// Probability floor for discretized-Gaussian bins.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Silu(Var),
    Softplus(Var, f64),
    GaussianLogDensity(Var, Var, Var),
    DiscretizedGaussianLogMass(Var, Var, Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Broadcast(..) => "broadcast",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSums(..) => "row_sums",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::GaussianLogDensity(..) => "gaussian_log_density",
            Op::DiscretizedGaussianLogMass(..) => "discretized_gaussian_log_mass",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

/// Every primitive the graph can record. Each has a backward rule.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "offset",
    "matmul",
    "broadcast",
    "sum",
    "mean",
    "row_sums",
    "exp",
    "log",
    "sqrt",
    "square",
    "silu",
    "softplus",
    "gaussian_log_density",
    "discretized_gaussian_log_mass",
    "reshape",
    "slice_cols",
];

/// Names of the supported primitives.
pub fn primitives() -> &'static [&'static str] {
    PRIMITIVES
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    floor_hits: usize,
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source offsets that map each element of `out_shape` back into a tensor of
/// `in_shape` broadcast against it. `None` means the identity mapping.
fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let n: usize = out_shape.iter().product();
    let in_len: usize = in_shape.iter().product();
    if in_len == 1 {
        return Some(vec![0; n]);
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    // Row-broadcast fast path: [m, n] <- [n] or [1, n].
    if rank == 2 && in_strides[0] == 0 && in_strides[1] == 1 {
        let cols = out_shape[1];
        return Some((0..n).map(|i| i % cols).collect());
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(counter.iter().zip(&in_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Some(idx)
}

#[inline]
fn at(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        None => data[i],
        Some(m) => data[m[i]],
    }
}

/// Sums `grad` (laid out in the broadcast shape) back into `len` slots.
fn reduce_into(grad: &[f64], map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (g, &j) in grad.iter().zip(m) {
                out[j] += g;
            }
            out
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
    }
}

/// `[m, k] x [k, n]` product on flat buffers.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` where `a` is `[k, m]` and `b` is `[k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` where `a` is `[m, n]` and `b` is `[k, n]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Matrix view `(rows, cols)` used by matmul for rank-1 and rank-2 operands.
fn mat_dims(shape: &[usize], is_left: bool) -> Option<(usize, usize)> {
    match shape.len() {
        1 if is_left => Some((1, shape[0])),
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

/// Bin edges of a pixel value on the 256-level grid, open-ended at the extremes.
fn pixel_bin(x: f64) -> (f64, f64) {
    let lo = if x < PIXEL_HALF_BIN {
        f64::NEG_INFINITY
    } else {
        x - PIXEL_HALF_BIN
    };
    let hi = if x > 1.0 - PIXEL_HALF_BIN {
        f64::INFINITY
    } else {
        x + PIXEL_HALF_BIN
    };
    (lo, hi)
}

/// Log-probability of the pixel bin containing `x` under `N(mean, scale²)`,
/// together with its derivatives in `mean` and `scale`. Returns `None` in place
/// of the derivatives when the bin mass falls below [`MASS_FLOOR`].
pub fn discretized_log_mass(x: f64, mean: f64, scale: f64) -> (f64, Option<(f64, f64)>) {
    let (lo, hi) = pixel_bin(x);
    let a = (lo - mean) / scale;
    let b = (hi - mean) / scale;
    let mass = special::normal_interval_mass(a, b);
    if !(mass >= MASS_FLOOR) {
        return (MASS_FLOOR.ln(), None);
    }
    let pa = special::normal_pdf(a);
    let pb = special::normal_pdf(b);
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let d_mean = (pa - pb) / (scale * mass);
    let d_scale = (apa - bpb) / (scale * mass);
    (mass.ln(), Some((d_mean, d_scale)))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of discretized-Gaussian bins whose mass hit the floor.
    pub fn floor_hits(&self) -> usize {
        self.floor_hits
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if value.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NumericFault { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, or `None` if it has not been reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Leaf gradient, zero-filled when the leaf was not reached.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let ia = broadcast_index(&sa, &out_shape);
        let ib = broadcast_index(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..n).map(|i| f(at(da, &ia, i), at(db, &ib, i))).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(out_shape, data), op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Matrix product of rank-1/rank-2 operands (`[m,k]x[k,n]`, `[m,k]x[k]`, `[k]x[k,n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = mat_dims(&sa, true).ok_or_else(mismatch)?;
        let (k2, n) = mat_dims(&sb, false).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![],
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), rg)
    }

    /// Explicit broadcast of `a` to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_index(&sa, shape);
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        let data = (0..n).map(|i| at(src, &map, i)).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over all trailing axes, one value per row: `[m, ...] -> [m]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let rows = v.rows();
        let data: Vec<f64> = (0..rows).map(|i| v.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![rows], data), Op::RowSums(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), special::silu)
    }

    /// `ln(1 + exp(beta x)) / beta`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Result<Var> {
        self.unary(a, Op::Softplus(a, beta), |x| special::softplus(x, beta))
    }

    fn ternary_maps(
        &self,
        name: &'static str,
        x: Var,
        mean: Var,
        scale: Var,
    ) -> Result<(Vec<usize>, [Option<Vec<usize>>; 3])> {
        let (sx, sm, ss) = (self.shape(x), self.shape(mean), self.shape(scale));
        let mismatch = |l: &[usize], r: &[usize]| Error::ShapeMismatch {
            op: name,
            lhs: l.to_vec(),
            rhs: r.to_vec(),
        };
        let s1 = broadcast_shape(sx, sm).ok_or_else(|| mismatch(sx, sm))?;
        let out = broadcast_shape(&s1, ss).ok_or_else(|| mismatch(&s1, ss))?;
        let maps = [
            broadcast_index(sx, &out),
            broadcast_index(sm, &out),
            broadcast_index(ss, &out),
        ];
        Ok((out, maps))
    }

    /// Elementwise `log N(x; mean, scale²)`, broadcasting all three operands.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, scale: Var) -> Result<Var> {
        let (out, [ix, im, is]) = self.ternary_maps("gaussian_log_density", x, mean, scale)?;
        let n: usize = out.iter().product();
        let (dx, dm, ds) = (
            self.value(x).data(),
            self.value(mean).data(),
            self.value(scale).data(),
        );
        let data = (0..n)
            .map(|i| special::gaussian_log_density(at(dx, &ix, i), at(dm, &im, i), at(ds, &is, i)))
            .collect();
        let rg = self.rg(x) || self.rg(mean) || self.rg(scale);
        self.push(
            Tensor::from_parts(out, data),
            Op::GaussianLogDensity(x, mean, scale),
            rg,
        )
    }

    /// Elementwise log-probability of each pixel's bin on the 256-level grid.
    /// `x` is treated as data (no gradient flows into it).
    pub fn discretized_gaussian_log_mass(&mut self, x: Var, mean: Var, scale: Var) -> Result<Var> {
        let (out, [ix, im, is]) =
            self.ternary_maps("discretized_gaussian_log_mass", x, mean, scale)?;
        let n: usize = out.iter().product();
        let (dx, dm, ds) = (
            self.value(x).data(),
            self.value(mean).data(),
            self.value(scale).data(),
        );
        let mut hits = 0;
        let data = (0..n)
            .map(|i| {
                let (lp, d) = discretized_log_mass(at(dx, &ix, i), at(dm, &im, i), at(ds, &is, i));
                if d.is_none() {
                    hits += 1;
                }
                lp
            })
            .collect();
        if hits > 0 {
            log::debug!("discretized gaussian: {hits} bins floored at log({MASS_FLOOR:e})");
        }
        self.floor_hits += hits;
        let rg = self.rg(mean) || self.rg(scale);
        self.push(
            Tensor::from_parts(out, data),
            Op::DiscretizedGaussianLogMass(x, mean, scale),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || start > end || end > v.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = v.shape()[0];
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_parts(vec![rows, end - start], data),
            Op::SliceCols(a, start, end),
            rg,
        )
    }

    /// Reverse sweep from a scalar `out`, accumulating into leaf gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let out_len = self.value(out).len();
        if out_len != 1 {
            return Err(Error::NonScalar {
                shape: self.shape(out).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| self.nodes[v.0].value.data();
            let shape = |v: Var| self.nodes[v.0].value.shape();
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match node.op {
                Op::Leaf => leaf_updates.push((i, g)),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let out_shape = node.value.shape();
                    if rg(a) {
                        let m = broadcast_index(shape(a), out_shape);
                        add_into(&mut grads[a.0], reduce_into(&g, &m, val(a).len()));
                    }
                    if rg(b) {
                        let m = broadcast_index(shape(b), out_shape);
                        let mut c = reduce_into(&g, &m, val(b).len());
                        if sign < 0.0 {
                            c.iter_mut().for_each(|v| *v = -*v);
                        }
                        add_into(&mut grads[b.0], c);
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let is_div = matches!(node.op, Op::Div(..));
                    let out_shape = node.value.shape();
                    let ma = broadcast_index(shape(a), out_shape);
                    let mb = broadcast_index(shape(b), out_shape);
                    let (da, db) = (val(a), val(b));
                    if rg(a) {
                        let local: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(k, gk)| {
                                let bv = at(db, &mb, k);
                                if is_div {
                                    gk / bv
                                } else {
                                    gk * bv
                                }
                            })
                            .collect();
                        add_into(&mut grads[a.0], reduce_into(&local, &ma, da.len()));
                    }
                    if rg(b) {
                        let local: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(k, gk)| {
                                let av = at(da, &ma, k);
                                if is_div {
                                    let bv = at(db, &mb, k);
                                    -gk * av / (bv * bv)
                                } else {
                                    gk * av
                                }
                            })
                            .collect();
                        add_into(&mut grads[b.0], reduce_into(&local, &mb, db.len()));
                    }
                }
                Op::Neg(a) => add_into(&mut grads[a.0], g.iter().map(|v| -v).collect()),
                Op::Scale(a, c) => add_into(&mut grads[a.0], g.iter().map(|v| c * v).collect()),
                Op::Offset(a) | Op::Reshape(a) => add_into(&mut grads[a.0], g),
                Op::MatMul(a, b) => {
                    let (m, k) = mat_dims(shape(a), true).expect("checked in forward");
                    let (_, n) = mat_dims(shape(b), false).expect("checked in forward");
                    if rg(a) {
                        // dA = G B^T
                        add_into(&mut grads[a.0], matmul_nt(&g, val(b), m, n, k));
                    }
                    if rg(b) {
                        // dB = A^T G
                        add_into(&mut grads[b.0], matmul_tn(val(a), &g, m, k, n));
                    }
                }
                Op::Broadcast(a) => {
                    let m = broadcast_index(shape(a), node.value.shape());
                    add_into(&mut grads[a.0], reduce_into(&g, &m, val(a).len()));
                }
                Op::Sum(a) => add_into(&mut grads[a.0], vec![g[0]; val(a).len()]),
                Op::Mean(a) => {
                    let n = val(a).len();
                    add_into(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
                Op::RowSums(a) => {
                    let v = &self.nodes[a.0].value;
                    let cols = v.cols();
                    let c = (0..v.len()).map(|j| g[j / cols]).collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Exp(a) => {
                    let c = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Log(a) => {
                    let c = g.iter().zip(val(a)).map(|(g, x)| g / x).collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Sqrt(a) => {
                    let c = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| 0.5 * g / y)
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Square(a) => {
                    let c = g.iter().zip(val(a)).map(|(g, x)| 2.0 * g * x).collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Silu(a) => {
                    let c = g
                        .iter()
                        .zip(val(a))
                        .map(|(g, &x)| g * special::silu_grad(x))
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::Softplus(a, beta) => {
                    let c = g
                        .iter()
                        .zip(val(a))
                        .map(|(g, &x)| g * special::softplus_grad(x, beta))
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
                Op::GaussianLogDensity(x, mean, scale)
                | Op::DiscretizedGaussianLogMass(x, mean, scale) => {
                    let discrete = matches!(node.op, Op::DiscretizedGaussianLogMass(..));
                    let out_shape = node.value.shape();
                    let mx = broadcast_index(shape(x), out_shape);
                    let mm = broadcast_index(shape(mean), out_shape);
                    let ms = broadcast_index(shape(scale), out_shape);
                    let (dx, dm, ds) = (val(x), val(mean), val(scale));
                    let n = g.len();
                    let mut gx = vec![0.0; n];
                    let mut gm = vec![0.0; n];
                    let mut gs = vec![0.0; n];
                    for k in 0..n {
                        let (xv, mv, sv) = (at(dx, &mx, k), at(dm, &mm, k), at(ds, &ms, k));
                        if discrete {
                            if let (_, Some((d_mean, d_scale))) = discretized_log_mass(xv, mv, sv)
                            {
                                gm[k] = g[k] * d_mean;
                                gs[k] = g[k] * d_scale;
                            }
                        } else {
                            let u = (xv - mv) / sv;
                            gx[k] = -g[k] * u / sv;
                            gm[k] = g[k] * u / sv;
                            gs[k] = g[k] * (u * u - 1.0) / sv;
                        }
                    }
                    if !discrete && rg(x) {
                        add_into(&mut grads[x.0], reduce_into(&gx, &mx, dx.len()));
                    }
                    if rg(mean) {
                        add_into(&mut grads[mean.0], reduce_into(&gm, &mm, dm.len()));
                    }
                    if rg(scale) {
                        add_into(&mut grads[scale.0], reduce_into(&gs, &ms, ds.len()));
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let v = &self.nodes[a.0].value;
                    let (rows, cols) = (v.shape()[0], v.shape()[1]);
                    let w = end - start;
                    let mut c = vec![0.0; rows * cols];
                    for r in 0..rows {
                        c[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    add_into(&mut grads[a.0], c);
                }
            }
        }

        for (i, g) in leaf_updates {
            add_into(&mut self.leaf_grads[i], g);
        }
        Ok(())
    }
}
