//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the record in reverse, accumulating gradients additively into
//! the inputs of each node, and reports gradients only for trainable
//! leaves (parameters registered from a [`ParamStore`] or explicit
//! variables).

use std::ops::Range;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row ranges, one per group (bag), covering `0..total_rows`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    ranges: Vec<Range<usize>>,
    total: usize,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self, DiffError> {
        let mut ranges = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            if n == 0 {
                return Err(DiffError::Shape { op: "segments", detail: "empty segment".into() });
            }
            ranges.push(start..start + n);
            start += n;
        }
        if ranges.is_empty() {
            return Err(DiffError::Shape { op: "segments", detail: "no segments".into() });
        }
        Ok(Self { ranges, total: start })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Neg,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinaryKind, Broadcast, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    SumCols(Var),
    SumAll(Var),
    SegmentMean(Var, Arc<Segments>),
    SegmentSum(Var, Arc<Segments>),
    SegmentMax(Var, Vec<usize>),
    Broadcast(Var, Arc<Segments>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Tape::backward`], keyed by trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    variables: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.variables.iter().find(|(x, _)| *x == v).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, t)| (*p, t))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => self.params.push((id, g)),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.params {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    stable_softplus(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Trainable leaf not owned by a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable, true)
    }

    /// Registers a stored parameter on this tape; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars.push((id, v));
        v
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), DiffError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(DiffError::Shape { op, detail: format!("expected a matrix, got shape {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                detail: format!("cannot multiply {m}x{k} by {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).values(), m, k, false, self.value(b).values(), k, n, false, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts_unchecked(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape();
        let mode = if sa == sb {
            Broadcast::Same
        } else if self.value(b).len() == 1 {
            Broadcast::Scalar
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1] {
            Broadcast::Row
        } else {
            return Err(DiffError::Shape { op: name, detail: format!("{sa:?} vs {sb:?}") });
        };
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<f64> = match mode {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => {
                let c = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % c])).collect()
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts_unchecked(sa, out), Op::Binary(kind, mode, a, b), needs))
    }

    /// `a + b`; `b` may be a 1x1 scalar or a 1xm row broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = xv.values().iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(DiffError::Domain { op: "log", value: *bad });
            }
        }
        let out = match kind {
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::Sigmoid => xv.map(stable_sigmoid),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => xv.map(f64::ln),
            Unary::Softplus => xv.map(stable_softplus),
            Unary::Neg => xv.map(|v| -v),
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Unary(kind, x), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(out, Op::AddScalar(x), needs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(out, Op::Clamp(x, lo, hi), needs)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(DiffError::Shape {
                op: "slice_cols",
                detail: format!("columns {start}..{end} of a {r}x{c} matrix"),
            });
        }
        let w = end - start;
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts_unchecked(vec![r, w], out), Op::SliceCols(x, start), needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(DiffError::Shape {
                op: "concat_cols",
                detail: format!("{ra}x{ca} and {rb}x{cb} differ in rows"),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts_unchecked(vec![ra, ca + cb], out), Op::ConcatCols(a, b), needs))
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.matrix_dims(x, "sum_cols")?;
        let xv = self.value(x).values();
        let out = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts_unchecked(vec![r, 1], out), Op::SumCols(x), needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    fn check_segments(&self, x: Var, segs: &Segments, op: &'static str) -> Result<(usize, usize), DiffError> {
        let (r, c) = self.matrix_dims(x, op)?;
        if r != segs.total_rows() {
            return Err(DiffError::Shape {
                op,
                detail: format!("{r} rows but segments cover {}", segs.total_rows()),
            });
        }
        Ok((r, c))
    }

    /// Per-segment row mean: `n x m -> s x m`.
    pub fn segment_mean(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var, DiffError> {
        let (_, c) = self.check_segments(x, segs, "segment_mean")?;
        let out = segment_reduce(self.value(x).values(), c, segs, true);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![segs.len(), c], out),
            Op::SegmentMean(x, Arc::clone(segs)),
            needs,
        ))
    }

    /// Per-segment row sum: `n x m -> s x m`.
    pub fn segment_sum(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var, DiffError> {
        let (_, c) = self.check_segments(x, segs, "segment_sum")?;
        let out = segment_reduce(self.value(x).values(), c, segs, false);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![segs.len(), c], out),
            Op::SegmentSum(x, Arc::clone(segs)),
            needs,
        ))
    }

    /// Per-segment column-wise maximum: `n x m -> s x m`. The gradient flows
    /// to the first row attaining the maximum.
    pub fn segment_max(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var, DiffError> {
        let (_, c) = self.check_segments(x, segs, "segment_max")?;
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(segs.len() * c);
        let mut arg = Vec::with_capacity(segs.len() * c);
        for range in segs.ranges() {
            for j in 0..c {
                let mut best = range.start;
                for i in range.clone() {
                    if xv[i * c + j] > xv[best * c + j] {
                        best = i;
                    }
                }
                out.push(xv[best * c + j]);
                arg.push(best * c + j);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts_unchecked(vec![segs.len(), c], out), Op::SegmentMax(x, arg), needs))
    }

    /// Repeats row `s` of `x` for every row of segment `s`: `s x m -> n x m`.
    pub fn broadcast_segments(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var, DiffError> {
        let (r, c) = self.matrix_dims(x, "broadcast_segments")?;
        if r != segs.len() {
            return Err(DiffError::Shape {
                op: "broadcast_segments",
                detail: format!("{r} rows for {} segments", segs.len()),
            });
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(segs.total_rows() * c);
        for (s, range) in segs.ranges().iter().enumerate() {
            for _ in range.clone() {
                out.extend_from_slice(&xv[s * c..(s + 1) * c]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![segs.total_rows(), c], out),
            Op::Broadcast(x, Arc::clone(segs)),
            needs,
        ))
    }

    /// Replays the record backward from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let root = self.nodes.get(loss.0).ok_or(DiffError::Contract("loss is not a node of this tape"))?;
        if !root.value.is_scalar() {
            return Err(DiffError::NotScalar { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts_unchecked(root.value.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Variable | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(g.values(), m, n, false, bv.values(), k, n, true, &mut da);
                        accumulate(&mut grads, *a, Tensor::from_parts_unchecked(vec![m, k], da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(av.values(), m, k, true, g.values(), m, n, false, &mut db);
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(vec![k, n], db));
                    }
                }
                Op::Binary(kind, mode, a, b) => {
                    let av = self.nodes[a.0].value.values();
                    let bv = &self.nodes[b.0].value;
                    let bvals = bv.values();
                    let bidx = |i: usize| match mode {
                        Broadcast::Same => i,
                        Broadcast::Scalar => 0,
                        Broadcast::Row => i % bvals.len(),
                    };
                    if self.needs(*a) {
                        let da: Vec<f64> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.values().to_vec(),
                            BinaryKind::Mul => {
                                g.values().iter().enumerate().map(|(i, gi)| gi * bvals[bidx(i)]).collect()
                            }
                        };
                        accumulate(&mut grads, *a, Tensor::from_parts_unchecked(g.shape().to_vec(), da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; bvals.len()];
                        for (i, gi) in g.values().iter().enumerate() {
                            db[bidx(i)] += match kind {
                                BinaryKind::Add => *gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * av[i],
                            };
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(bv.shape().to_vec(), db));
                    }
                }
                Op::Unary(kind, x) => {
                    if self.needs(*x) {
                        let xv = self.nodes[x.0].value.values();
                        let yv = node.value.values();
                        let dx = g
                            .values()
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| {
                                gi * match kind {
                                    Unary::Relu => {
                                        if xv[i] > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                                    Unary::Exp => yv[i],
                                    Unary::Log => 1.0 / xv[i],
                                    Unary::Softplus => stable_sigmoid(xv[i]),
                                    Unary::Neg => -1.0,
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(g.shape().to_vec(), dx));
                    }
                }
                Op::Scale(x, f) => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.map(|v| v * f));
                    }
                }
                Op::AddScalar(x) => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    if self.needs(*x) {
                        let xv = self.nodes[x.0].value.values();
                        let dx = g
                            .values()
                            .iter()
                            .zip(xv)
                            .map(|(gi, v)| if *v < *lo || *v > *hi { 0.0 } else { *gi })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(g.shape().to_vec(), dx));
                    }
                }
                Op::SliceCols(x, start) => {
                    if self.needs(*x) {
                        let s = self.nodes[x.0].value.shape();
                        let (r, c) = (s[0], s[1]);
                        let w = g.shape()[1];
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            dx[i * c + start..i * c + start + w].copy_from_slice(&g.values()[i * w..(i + 1) * w]);
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(vec![r, c], dx));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let r = g.shape()[0];
                    let ca = self.nodes[a.0].value.shape()[1];
                    let cb = self.nodes[b.0].value.shape()[1];
                    let gv = g.values();
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(r * ca);
                        for i in 0..r {
                            da.extend_from_slice(&gv[i * (ca + cb)..i * (ca + cb) + ca]);
                        }
                        accumulate(&mut grads, *a, Tensor::from_parts_unchecked(vec![r, ca], da));
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(r * cb);
                        for i in 0..r {
                            db.extend_from_slice(&gv[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(vec![r, cb], db));
                    }
                }
                Op::SumCols(x) => {
                    if self.needs(*x) {
                        let s = self.nodes[x.0].value.shape();
                        let (r, c) = (s[0], s[1]);
                        let dx = (0..r * c).map(|i| g.values()[i / c]).collect();
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(vec![r, c], dx));
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(*x) {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        accumulate(&mut grads, *x, Tensor::filled(&shape, g.item()));
                    }
                }
                Op::SegmentMean(x, segs) | Op::SegmentSum(x, segs) => {
                    if self.needs(*x) {
                        let mean = matches!(node.op, Op::SegmentMean(..));
                        let c = g.shape()[1];
                        let mut dx = vec![0.0; segs.total_rows() * c];
                        for (s, range) in segs.ranges().iter().enumerate() {
                            let w = if mean { 1.0 / range.len() as f64 } else { 1.0 };
                            for i in range.clone() {
                                for j in 0..c {
                                    dx[i * c + j] = g.values()[s * c + j] * w;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(vec![segs.total_rows(), c], dx));
                    }
                }
                Op::SegmentMax(x, arg) => {
                    if self.needs(*x) {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        let mut dx = Tensor::zeros(&shape);
                        for (k, &flat) in arg.iter().enumerate() {
                            dx.values_mut()[flat] += g.values()[k];
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Broadcast(x, segs) => {
                    if self.needs(*x) {
                        let c = g.shape()[1];
                        let mut dx = vec![0.0; segs.len() * c];
                        for (s, range) in segs.ranges().iter().enumerate() {
                            for i in range.clone() {
                                for j in 0..c {
                                    dx[s * c + j] += g.values()[i * c + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts_unchecked(vec![segs.len(), c], dx));
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[idx].op {
                Op::Param(id) => out.params.push((id, g)),
                Op::Variable => out.variables.push((Var(idx), g)),
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums each segment column in ascending value order, so the result does not
/// depend on row order within a segment.
fn segment_reduce(xv: &[f64], c: usize, segs: &Segments, mean: bool) -> Vec<f64> {
    let mut out = vec![0.0; segs.len() * c];
    let mut column = Vec::new();
    for (s, range) in segs.ranges().iter().enumerate() {
        for j in 0..c {
            column.clear();
            column.extend(range.clone().map(|i| xv[i * c + j]));
            column.sort_unstable_by(f64::total_cmp);
            let total: f64 = column.iter().sum();
            out[s * c + j] = if mean { total / range.len() as f64 } else { total };
        }
    }
    out
}
