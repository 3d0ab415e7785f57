//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Var::backward`] walks the
//! tape in reverse and accumulates exact analytic gradients into every
//! tracked leaf.
//!
//! ```
//! use sot_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
//! let y = x.mul(&x).unwrap().sum().unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[6.0, -2.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::{axis_split, check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Log,
    Abs,
    Pow(f64),
    Clamp(f64, f64),
}

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch (training).
    Batch { eps: f64 },
    /// Normalize with fixed running statistics (evaluation).
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        arg: Vec<usize>,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ScatterMean {
        x: usize,
        cells: Vec<Option<usize>>,
        counts: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Recording context for one forward (and optionally backward) pass.
///
/// Cloning a `Graph` yields another handle to the same tape.
#[derive(Clone)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
            grad_enabled: true,
        }
    }

    /// A graph whose leaves are never tracked; used for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (tracked when gradients are enabled).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, self.grad_enabled)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, t: Tensor, op: Op, tracked: bool) -> Var {
        let value = Rc::new(t);
        let op = if tracked { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::clone(&value),
            op,
            tracked,
        });
        Var {
            graph: self.clone(),
            id,
            value,
            tracked,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn emit(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        check_finite(op_name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, tracked))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} out of range for rank {rank}"));
        }
        let mut total = 0;
        for v in xs {
            self.check_graph(v)?;
            let s = v.shape();
            if s.len() != rank
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), s));
            }
            total += s[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in xs {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.value.data()[o * len..(o + 1) * len]);
            }
        }
        let tracked = xs.iter().any(|v| v.tracked);
        let op = Op::Concat {
            xs: xs.iter().map(|v| v.id).collect(),
            axis,
        };
        self.emit("concat", shape, data, op, tracked)
    }

    fn check_graph(&self, v: &Var) -> Result<()> {
        if self.same(&v.graph) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands belong to different graphs".into()))
        }
    }
}

/// A value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    value: Rc<Tensor>,
    tracked: bool,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("tracked", &self.tracked)
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    a.graph.check_graph(b)?;
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    fn emit(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        self.graph.emit(op_name, shape, data, op, tracked)
    }

    fn binary(&self, other: &Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        self.emit(name, self.shape().to_vec(), data, op, self.tracked || other.tracked)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        let data = self.data().iter().map(|v| v * s).collect();
        self.emit("scale", self.shape().to_vec(), data, Op::Scale(self.id, s), self.tracked)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        let data = self.data().iter().map(|v| v + s).collect();
        self.emit("add_scalar", self.shape().to_vec(), data, Op::Shift(self.id), self.tracked)
    }

    /// `1 - x`, common enough in probability code to deserve a name.
    pub fn one_minus(&self) -> Result<Var> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    pub fn unary(&self, kind: Unary) -> Result<Var> {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Log => Box::new(f64::ln),
            Unary::Abs => Box::new(f64::abs),
            Unary::Pow(p) => Box::new(move |v: f64| v.powf(p)),
            Unary::Clamp(lo, hi) => Box::new(move |v: f64| v.clamp(lo, hi)),
        };
        let data = self.data().iter().map(|&v| f(v)).collect();
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Pow(_) => "pow",
            Unary::Clamp(..) => "clamp",
        };
        self.emit(name, self.shape().to_vec(), data, Op::Unary(self.id, kind), self.tracked)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Unary::Sigmoid)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(Unary::Log)
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary(Unary::Abs)
    }

    pub fn powf(&self, p: f64) -> Result<Var> {
        self.unary(Unary::Pow(p))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.graph.check_graph(other)?;
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return shape_err("matmul", format!("{a:?} × {b:?}"));
        }
        let (n, k, m) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.data(), false, other.data(), false, &mut out, 0.0);
        self.emit("matmul", vec![n, m], out, Op::MatMul(self.id, other.id), self.tracked || other.tracked)
    }

    /// `x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        self.graph.check_graph(w)?;
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?} vs weight {ws:?}"));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            self.graph.check_graph(b)?;
            if b.shape() != [cout] {
                return shape_err("linear", format!("bias {:?} for {cout} outputs", b.shape()));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(n, cin, cout, self.data(), false, w.data(), true, &mut out, 1.0);
        let tracked = self.tracked || w.tracked || b.is_some_and(|b| b.tracked);
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        self.emit("linear", vec![n, cout], out, op, tracked)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value.len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} → {shape:?}", self.shape()));
        }
        self.emit("reshape", shape.to_vec(), self.data().to_vec(), Op::Reshape(self.id), self.tracked)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("axes {axes:?} for shape {shape:?}"));
        }
        let (out_shape, data) = permute_data(shape, self.data(), axes);
        let op = Op::Permute {
            x: self.id,
            axes: axes.to_vec(),
        };
        self.emit("permute", out_shape, data, op, self.tracked)
    }

    pub fn transpose(&self) -> Result<Var> {
        if self.shape().len() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {:?}", self.shape()));
        }
        self.permute(&[1, 0])
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.shape().len() {
            return shape_err(op, format!("axis {axis} invalid for {:?}", self.shape()));
        }
        Ok(())
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        self.check_axis("softmax", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[at(a)] /= z;
                }
            }
        }
        let op = Op::Softmax { x: self.id, axis };
        self.emit("softmax", self.shape().to_vec(), y, op, self.tracked)
    }

    /// Maximum over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        let mut arg = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let j = (o * len + a) * inner + i;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                y[o * inner + i] = x[best];
                arg[o * inner + i] = best;
            }
        }
        let op = Op::MaxAxis { x: self.id, arg };
        self.emit("max_axis", self.reduced_shape(axis), y, op, self.tracked)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let op = Op::SumAxis { x: self.id, axis };
        self.emit("sum_axis", self.reduced_shape(axis), y, op, self.tracked)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", axis)?;
        let len = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / len)
    }

    pub fn sum(&self) -> Result<Var> {
        let s = self.data().iter().sum();
        self.emit("sum", vec![1], vec![s], Op::SumAll(self.id), self.tracked)
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Row gather on a 2-D tensor: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return shape_err("gather_rows", format!("expected 2-D, got {s:?}"));
        }
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index list");
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= s[0]) {
            return shape_err("gather_rows", format!("index {bad} out of range for {} rows", s[0]));
        }
        let c = s[1];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let op = Op::Gather {
            x: self.id,
            idx: idx.to_vec(),
        };
        self.emit("gather_rows", vec![idx.len(), c], out, op, self.tracked)
    }

    /// Same-padded stride-1 convolution. Input `[B, Cin, s...]`, kernel
    /// `[Cout, Cin, k...]` with one to three spatial axes and odd kernels.
    pub fn conv(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        self.graph.check_graph(w)?;
        let geom = ConvGeom::infer(self.shape(), w.shape())?;
        if let Some(b) = b {
            self.graph.check_graph(b)?;
            if b.shape() != [geom.cout] {
                return shape_err("conv", format!("bias {:?} for {} outputs", b.shape(), geom.cout));
            }
        }
        let y = conv::forward(&geom, self.data(), w.data(), b.map(|b| b.data()));
        let mut shape = self.shape().to_vec();
        shape[1] = geom.cout;
        let tracked = self.tracked || w.tracked || b.is_some_and(|b| b.tracked);
        let op = Op::Conv {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
        };
        self.emit("conv", shape, y, op, tracked)
    }

    /// Per-channel normalization of `[B, C, s...]` (channel axis 1).
    ///
    /// With [`NormStats::Batch`] the second return value carries the batch
    /// mean and unbiased variance for running-statistics updates.
    pub fn batch_norm(&self, scale: &Var, shift: &Var, stats: NormStats<'_>) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape();
        if s.len() < 2 {
            return shape_err("batch_norm", format!("expected [B, C, ...], got {s:?}"));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if scale.shape() != [c] || shift.shape() != [c] {
            return shape_err("batch_norm", format!("affine params must be [{c}]"));
        }
        let m = b * inner;
        let x = self.data();
        let at = |bi: usize, ci: usize| (bi * c + ci) * inner;
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        acc += x[at(bi, ci)..at(bi, ci) + inner].iter().sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        sq += x[at(bi, ci)..at(bi, ci) + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = sq / m as f64;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm", format!("running stats must have {c} entries"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let (g, h) = (scale.data()[ci], shift.data()[ci]);
                for j in at(bi, ci)..at(bi, ci) + inner {
                    let n = (x[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = n;
                    y[j] = g * n + h;
                }
            }
        }
        let running = batch_stats.then(|| {
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            (mean, var.iter().map(|v| v * unbiased).collect())
        });
        let tracked = self.tracked || scale.tracked || shift.tracked;
        let op = Op::BatchNorm {
            x: self.id,
            scale: scale.id,
            shift: shift.id,
            xhat,
            inv_std,
            batch_stats,
        };
        let out = self.emit("batch_norm", s.to_vec(), y, op, tracked)?;
        Ok((out, running))
    }

    /// Averages rows of `x: [N, C]` into `n_cells` bins; rows whose cell is
    /// `None` are ignored and empty cells stay zero. Output is `[C, n_cells]`.
    pub fn scatter_mean(&self, cells: &[Option<usize>], n_cells: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || cells.len() != s[0] {
            return shape_err("scatter_mean", format!("{} cell ids for input {s:?}", cells.len()));
        }
        if n_cells == 0 || cells.iter().flatten().any(|&c| c >= n_cells) {
            return shape_err("scatter_mean", format!("cell index outside 0..{n_cells}"));
        }
        let ch = s[1];
        let mut counts = vec![0usize; n_cells];
        for c in cells.iter().flatten() {
            counts[*c] += 1;
        }
        let mut y = vec![0.0; ch * n_cells];
        for (r, cell) in cells.iter().enumerate() {
            if let Some(cell) = *cell {
                let w = 1.0 / counts[cell] as f64;
                for (k, v) in self.value.row(r).iter().enumerate() {
                    y[k * n_cells + cell] += v * w;
                }
            }
        }
        let op = Op::ScatterMean {
            x: self.id,
            cells: cells.to_vec(),
            counts,
        };
        self.emit("scatter_mean", vec![ch, n_cells], y, op, self.tracked)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let nodes = self.graph.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.id + 1];
        if self.tracked {
            grads[self.id] = Some(vec![1.0]);
        }
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients {
            graph: self.graph.clone(),
            leaves,
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn permute_data(shape: &[usize], x: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0; rank];
    let mut src = 0usize;
    let last = rank - 1;
    loop {
        // innermost run
        let (n, st) = (out_shape[last], src_stride[last]);
        for j in 0..n {
            out.push(x[src + j * st]);
        }
        // carry
        let mut d = last;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            counter[d] += 1;
            src += src_stride[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_stride[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), v) in d.iter_mut().zip(g).zip(vb) {
                    *d += g * v;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, g), v) in d.iter_mut().zip(g).zip(va) {
                    *d += g * v;
                }
            });
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
        Op::Shift(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Unary(a, kind) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    let dx = match *kind {
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Log => 1.0 / x[i],
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Pow(p) => p * x[i].powf(p - 1.0),
                        Unary::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    d[i] += g[i] * dx;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| gemm(n, m, k, g, false, vb, true, d, 1.0));
            accumulate(nodes, grads, *b, |d| gemm(k, n, m, va, true, g, false, d, 1.0));
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (nodes[*x].value.shape(), nodes[*w].value.shape());
            let (n, cin, cout) = (sx[0], sx[1], sw[0]);
            let (vx, vw) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, |d| gemm(n, cout, cin, g, false, vw, false, d, 1.0));
            accumulate(nodes, grads, *w, |d| gemm(cout, n, cin, g, true, vx, false, d, 1.0));
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    for row in g.chunks(cout) {
                        add_into(d, row);
                    }
                });
            }
        }
        Op::Permute { x, axes } => {
            let (_, back) = permute_data(node.value.shape(), g, &inverse_axes(axes));
            accumulate(nodes, grads, *x, |d| add_into(d, &back));
        }
        Op::Concat { xs, axis } => {
            let shape = node.value.shape();
            let (outer, _, inner) = axis_split(shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].value.shape()[*axis] * inner;
                accumulate(nodes, grads, x, |d| {
                    for o in 0..outer {
                        add_into(&mut d[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                    }
                });
                offset += len;
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            });
        }
        Op::MaxAxis { x, arg } => accumulate(nodes, grads, *x, |d| {
            for (o, &src) in arg.iter().enumerate() {
                d[src] += g[o];
            }
        }),
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for a in 0..len {
                        add_into(&mut d[(o * len + a) * inner..(o * len + a + 1) * inner], &g[o * inner..(o + 1) * inner]);
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Gather { x, idx } => {
            let c = nodes[*x].value.shape()[1];
            accumulate(nodes, grads, *x, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            });
        }
        Op::Conv { x, w, b, geom } => {
            let need = (
                nodes[*x].tracked,
                nodes[*w].tracked,
                b.is_some_and(|b| nodes[b].tracked),
            );
            let cg = conv::backward(geom, val(*x), val(*w), g, need);
            if let Some(dx) = cg.dx {
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if let Some(dw) = cg.dw {
                accumulate(nodes, grads, *w, |d| add_into(d, &dw));
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(nodes, grads, *b, |d| add_into(d, &db));
            }
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = node.value.shape();
            let (b, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let m = (b * inner) as f64;
            let gamma = val(*scale);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    for j in base..base + inner {
                        dgamma[ci] += g[j] * xhat[j];
                        dbeta[ci] += g[j];
                    }
                }
            }
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        let k = gamma[ci] * inv_std[ci];
                        for j in base..base + inner {
                            d[j] += if *batch_stats {
                                k * (g[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
            });
            accumulate(nodes, grads, *scale, |d| add_into(d, &dgamma));
            accumulate(nodes, grads, *shift, |d| add_into(d, &dbeta));
        }
        Op::ScatterMean { x, cells, counts } => {
            let n_cells = counts.len();
            let ch = nodes[*x].value.shape()[1];
            accumulate(nodes, grads, *x, |d| {
                for (r, cell) in cells.iter().enumerate() {
                    if let Some(cell) = *cell {
                        let w = 1.0 / counts[cell] as f64;
                        for k in 0..ch {
                            d[r * ch + k] += g[k * n_cells + cell] * w;
                        }
                    }
                }
            });
        }
    }
}

/// Gradients of a scalar with respect to every tracked leaf of its graph.
pub struct Gradients {
    graph: Graph,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` is not a tracked leaf or is unreachable from the output.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        if !self.graph.same(&v.graph) {
            return None;
        }
        self.leaves.get(v.id).and_then(Option::as_ref)
    }
}
