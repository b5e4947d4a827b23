//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! record keeps its output value, its input ids and whatever the adjoint
//! needs; [`Tape::backward`] replays the records in reverse. Records are
//! appended in creation order, so inputs always precede their consumers.

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{mm_nn, mm_nt, mm_tn, sigmoid};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Sum(usize),
    MeanRows(usize),
    Softmax(usize),
    MaskFill(usize, Arc<Vec<bool>>),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows(usize, Vec<usize>),
    ScatterRows(Vec<(usize, Vec<usize>)>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Silu(usize),
    Rope {
        x: usize,
        rot: Arc<Rotation>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Softmax(..) => "softmax_rows",
            Op::MaskFill(..) => "mask_fill",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Silu(..) => "silu",
            Op::Rope { .. } => "rope",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Softmax(a)
            | Op::MaskFill(a, _)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Silu(a) => vec![*a],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Embedding { table, .. } => vec![*table],
            Op::ScatterRows(parts) => parts.iter().map(|(p, _)| *p).collect(),
            Op::ConcatRows(ids) | Op::ConcatCols(ids) => ids.clone(),
            Op::Rope { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Precomputed rotary angles: one `(cos, sin)` pair per row and frequency.
#[derive(Debug)]
pub struct Rotation {
    rows: usize,
    half: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rotation {
    /// Angles for `positions` with per-head width `head_dim` (even) and base `base`.
    pub fn new(positions: &[usize], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::arg(format!("rotary head width {head_dim} is odd")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let theta = p as f64 * freq;
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Ok(Rotation {
            rows: positions.len(),
            half,
            head_dim,
            cos,
            sin,
        })
    }

    fn apply(&self, x: &[f64], cols: usize, inverse: bool) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..self.rows {
            let c = &self.cos[r * self.half..(r + 1) * self.half];
            let s = &self.sin[r * self.half..(r + 1) * self.half];
            for h in 0..cols / self.head_dim {
                let base = r * cols + h * self.head_dim;
                for i in 0..self.half {
                    let x0 = x[base + 2 * i];
                    let x1 = x[base + 2 * i + 1];
                    let si = sign * s[i];
                    out[base + 2 * i] = x0 * c[i] - x1 * si;
                    out[base + 2 * i + 1] = x0 * si + x1 * c[i];
                }
            }
        }
        out
    }
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by record id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`; exactly zero when `v` is off the path.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel(&self.shapes[v.id])],
        }
    }
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn add_owned(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primitive name and input record ids of record `id`.
    pub fn record(&self, id: usize) -> (&'static str, Vec<usize>) {
        let nodes = self.nodes.borrow();
        (nodes[id].op.name(), nodes[id].op.inputs())
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf. It receives gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.leaf_with(t, t.requires_grad())
    }

    /// Records `t` as a leaf with explicit gradient tracking.
    pub fn leaf_with(&self, t: &Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Arc::clone(t.data_arc()),
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf_with(t, false)
    }

    /// Concatenates rows of equal-width tensors.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let (_, cols) = as_matrix(&first.shape());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape();
            let (r, c) = as_matrix(&s);
            if c != cols {
                return Err(dim_err("concat_rows", &first.shape(), &s));
            }
            rows += r;
            data.extend_from_slice(&p.value());
        }
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Concatenates columns of equal-height tensors.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let (rows, _) = as_matrix(&first.shape());
        let shapes: Vec<(usize, usize)> = parts.iter().map(|p| as_matrix(&p.shape())).collect();
        if let Some(p) = parts.iter().find(|p| as_matrix(&p.shape()).0 != rows) {
            return Err(dim_err("concat_cols", &first.shape(), &p.shape()));
        }
        let total: usize = shapes.iter().map(|s| s.1).sum();
        let values: Vec<Arc<Vec<f64>>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &(_, c)) in values.iter().zip(&shapes) {
                data.extend_from_slice(&v[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            vec![rows, total],
            data,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Interleaves row blocks: row `r` of part `p` lands on output row `parts[p].1[r]`.
    /// Every output row must be written exactly once.
    pub fn scatter_rows<'t>(&'t self, parts: &[(Var<'t>, Vec<usize>)]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("scatter of nothing"))?;
        let (_, cols) = as_matrix(&first.0.shape());
        let total: usize = parts.iter().map(|(_, idx)| idx.len()).sum();
        let mut data = vec![0.0; total * cols];
        let mut seen = vec![false; total];
        for (v, idx) in parts {
            let s = v.shape();
            let (r, c) = as_matrix(&s);
            if c != cols || r != idx.len() {
                return Err(dim_err("scatter_rows", &[idx.len(), cols], &s));
            }
            let val = v.value();
            for (src, &dst) in idx.iter().enumerate() {
                if dst >= total || seen[dst] {
                    return Err(Error::arg(format!("scatter row {dst} invalid or repeated")));
                }
                seen[dst] = true;
                data[dst * cols..(dst + 1) * cols].copy_from_slice(&val[src * cols..(src + 1) * cols]);
            }
        }
        Ok(self.push(
            vec![total, cols],
            data,
            Op::ScatterRows(parts.iter().map(|(v, idx)| (v.id, idx.clone())).collect()),
        ))
    }

    /// Computes adjoints of every record reachable from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = &nodes[root.id].shape;
        if numel(root_shape) != 1 {
            return Err(Error::Rank(root_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = as_matrix(&nodes[*a].shape);
                    let (_, n) = as_matrix(&nodes[*b].shape);
                    if want(*a) {
                        add_owned(&mut grads[*a], mm_nt(&g, &nodes[*b].value, m, n, k));
                    }
                    if want(*b) {
                        add_owned(&mut grads[*b], mm_tn(&nodes[*a].value, &g, m, k, n));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = as_matrix(&nodes[*a].shape);
                    let (n, _) = as_matrix(&nodes[*b].shape);
                    if want(*a) {
                        add_owned(&mut grads[*a], mm_nn(&g, &nodes[*b].value, m, n, k));
                    }
                    if want(*b) {
                        add_owned(&mut grads[*b], mm_tn(&g, &nodes[*a].value, m, n, k));
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if want(*b) {
                        add_into(&mut grads[*b], &g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        let bv = &nodes[*b].value;
                        add_owned(&mut grads[*a], g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect());
                    }
                    if want(*b) {
                        let av = &nodes[*a].value;
                        add_owned(&mut grads[*b], g.iter().zip(av.iter()).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => {
                    add_owned(&mut grads[*a], g.iter().map(|x| x * c).collect());
                }
                Op::AddRow(a, b) => {
                    if want(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if want(*b) {
                        let n = numel(&nodes[*b].shape);
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                        add_owned(&mut grads[*b], gb);
                    }
                }
                Op::Sum(a) => {
                    let n = numel(&nodes[*a].shape);
                    add_owned(&mut grads[*a], vec![g[0]; n]);
                }
                Op::MeanRows(a) => {
                    let (m, n) = as_matrix(&nodes[*a].shape);
                    let inv = 1.0 / m as f64;
                    let mut ga = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        ga.extend(g.iter().map(|x| x * inv));
                    }
                    add_owned(&mut grads[*a], ga);
                }
                Op::Softmax(a) => {
                    let (_, n) = as_matrix(&node.shape);
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    add_owned(&mut grads[*a], ga);
                }
                Op::MaskFill(a, allow) => {
                    let ga = g
                        .iter()
                        .zip(allow.iter())
                        .map(|(x, &ok)| if ok { *x } else { 0.0 })
                        .collect();
                    add_owned(&mut grads[*a], ga);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (_, n) = as_matrix(&nodes[*x].shape);
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gain].value;
                    let mut gx = vec![0.0; xv.len()];
                    let mut gg = vec![0.0; n];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * n..(r + 1) * n];
                        let dr = &g[r * n..(r + 1) * n];
                        let mut dot = 0.0;
                        for j in 0..n {
                            let xhat = xr[j] * inv;
                            gg[j] += dr[j] * xhat;
                            dot += dr[j] * gv[j] * xhat;
                        }
                        let mean = dot / n as f64;
                        for j in 0..n {
                            let xhat = xr[j] * inv;
                            gx[r * n + j] = inv * (dr[j] * gv[j] - xhat * mean);
                        }
                    }
                    if want(*x) {
                        add_owned(&mut grads[*x], gx);
                    }
                    if want(*gain) {
                        add_owned(&mut grads[*gain], gg);
                    }
                }
                Op::Embedding { table, ids } => {
                    let (_, d) = as_matrix(&nodes[*table].shape);
                    let mut gt = vec![0.0; numel(&nodes[*table].shape)];
                    for (r, &tok) in ids.iter().enumerate() {
                        let dst = &mut gt[tok * d..(tok + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut grads[*table], gt);
                }
                Op::GatherRows(a, idx) => {
                    let (_, n) = as_matrix(&nodes[*a].shape);
                    let mut ga = vec![0.0; numel(&nodes[*a].shape)];
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut ga[src * n..(src + 1) * n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut grads[*a], ga);
                }
                Op::ScatterRows(parts) => {
                    let (_, n) = as_matrix(&node.shape);
                    for (p, idx) in parts {
                        if !want(*p) {
                            continue;
                        }
                        let mut gp = Vec::with_capacity(idx.len() * n);
                        for &dst in idx {
                            gp.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                        }
                        add_owned(&mut grads[*p], gp);
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut off = 0;
                    for &p in ids {
                        let len = numel(&nodes[p].shape);
                        if want(p) {
                            add_into(&mut grads[p], &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(ids) => {
                    let (rows, total) = as_matrix(&node.shape);
                    let mut col = 0;
                    for &p in ids {
                        let (_, c) = as_matrix(&nodes[p].shape);
                        if want(p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                            }
                            add_owned(&mut grads[p], gp);
                        }
                        col += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (_, n) = as_matrix(&nodes[*a].shape);
                    let mut ga = vec![0.0; numel(&nodes[*a].shape)];
                    ga[start * n..start * n + g.len()].copy_from_slice(&g);
                    add_owned(&mut grads[*a], ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, n) = as_matrix(&nodes[*a].shape);
                    let (_, w) = as_matrix(&node.shape);
                    let mut ga = vec![0.0; rows * n];
                    for r in 0..rows {
                        ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    add_owned(&mut grads[*a], ga);
                }
                Op::Silu(a) => {
                    let xv = &nodes[*a].value;
                    let ga = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    add_owned(&mut grads[*a], ga);
                }
                Op::Rope { x, rot } => {
                    let (_, n) = as_matrix(&node.shape);
                    add_owned(&mut grads[*x], rot.apply(&g, n, true));
                }
                Op::CrossEntropy { logits, rows, probs } => {
                    let (_, v) = as_matrix(&nodes[*logits].shape);
                    let scale = g[0] / rows.len() as f64;
                    let mut gl = vec![0.0; numel(&nodes[*logits].shape)];
                    for (k, &(r, target)) in rows.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (d, pv) in dst.iter_mut().zip(p) {
                            *d = pv * scale;
                        }
                        dst[target] -= scale;
                    }
                    add_owned(&mut grads[*logits], gl);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Detached copy of the current value.
    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::from_arc(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    fn dims(&self) -> (usize, usize) {
        as_matrix(&self.shape())
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(b);
        let (m, k) = self.dims();
        let (k2, n) = b.dims();
        if k != k2 {
            return Err(dim_err("matmul", &self.shape(), &b.shape()));
        }
        let out = mm_nn(&self.value(), &b.value(), m, k, n);
        Ok(self.tape.push(vec![m, n], out, Op::MatMul(self.id, b.id)))
    }

    /// `self · bᵀ`
    pub fn matmul_nt(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(b);
        let (m, k) = self.dims();
        let (n, k2) = b.dims();
        if k != k2 {
            return Err(dim_err("matmul_nt", &self.shape(), &b.shape()));
        }
        let out = mm_nt(&self.value(), &b.value(), m, k, n);
        Ok(self.tape.push(vec![m, n], out, Op::MatMulNT(self.id, b.id)))
    }

    fn zip_with(
        &self,
        b: &Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_tape(b);
        let (sa, sb) = (self.shape(), b.shape());
        if sa != sb {
            return Err(dim_err(op, &sa, &sb));
        }
        let out = self
            .value()
            .iter()
            .zip(b.value().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa, out))
    }

    pub fn add(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (s, out) = self.zip_with(b, "add", |x, y| x + y)?;
        Ok(self.tape.push(s, out, Op::Add(self.id, b.id)))
    }

    pub fn mul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (s, out) = self.zip_with(b, "mul", |x, y| x * y)?;
        Ok(self.tape.push(s, out, Op::Mul(self.id, b.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().iter().map(|x| x * c).collect();
        self.tape.push(self.shape(), out, Op::Scale(self.id, c))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row);
        let (_, n) = self.dims();
        let rv = row.value();
        if rv.len() != n {
            return Err(dim_err("add_row", &self.shape(), &row.shape()));
        }
        let out = self
            .value()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv.iter()).map(|(a, b)| a + b))
            .collect();
        Ok(self.tape.push(self.shape(), out, Op::AddRow(self.id, row.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().iter().sum();
        self.tape.push(vec![], vec![s], Op::Sum(self.id))
    }

    /// Column-wise mean of an `m×n` matrix, giving `1×n`.
    pub fn mean_rows(&self) -> Var<'t> {
        let (m, n) = self.dims();
        let v = self.value();
        let mut out = vec![0.0; n];
        for r in v.chunks(n) {
            out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.tape.push(vec![1, n], out, Op::MeanRows(self.id))
    }

    /// Row-wise softmax. Entries equal to `-inf` get zero mass; a row with no
    /// finite entry is rejected.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (_, n) = self.dims();
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for (r, (xr, yr)) in v.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            if !max.is_finite() {
                return Err(Error::arg(format!("non-finite softmax input in row {r}")));
            }
            let mut total = 0.0;
            for (y, &x) in yr.iter_mut().zip(xr) {
                *y = (x - max).exp();
                total += *y;
            }
            yr.iter_mut().for_each(|y| *y /= total);
        }
        Ok(self.tape.push(self.shape(), out, Op::Softmax(self.id)))
    }

    /// Replaces entries where `allow` is false with `-inf`.
    pub fn mask_fill(&self, allow: Arc<Vec<bool>>) -> Result<Var<'t>> {
        let v = self.value();
        if allow.len() != v.len() {
            return Err(dim_err("mask_fill", &self.shape(), &[allow.len()]));
        }
        let out = v
            .iter()
            .zip(allow.iter())
            .map(|(&x, &ok)| if ok { x } else { f64::NEG_INFINITY })
            .collect();
        Ok(self.tape.push(self.shape(), out, Op::MaskFill(self.id, allow)))
    }

    /// Root-mean-square normalization of each row, scaled by `gain`.
    pub fn rms_norm(&self, gain: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gain);
        let (_, n) = self.dims();
        let gv = gain.value();
        if gv.len() != n {
            return Err(dim_err("rms_norm", &self.shape(), &gain.shape()));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(v.len());
        let mut inv_rms = Vec::with_capacity(v.len() / n.max(1));
        for r in v.chunks(n) {
            let ms = r.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            out.extend(r.iter().zip(gv.iter()).map(|(x, g)| x * inv * g));
        }
        Ok(self.tape.push(
            self.shape(),
            out,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
        ))
    }

    /// Rows of `self` (a `V×d` table) selected by `ids`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (v, d) = self.dims();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::arg(format!("token id {bad} outside table of {v} rows")));
        }
        let tab = self.value();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        Ok(self.tape.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (m, n) = self.dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::arg(format!("row {bad} outside {m} rows")));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        Ok(self
            .tape
            .push(vec![idx.len(), n], out, Op::GatherRows(self.id, idx.to_vec())))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims();
        if start > end || end > m {
            return Err(dim_err("slice_rows", &self.shape(), &[start, end]));
        }
        let out = self.value()[start * n..end * n].to_vec();
        Ok(self
            .tape
            .push(vec![end - start, n], out, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims();
        if start > end || end > n {
            return Err(dim_err("slice_cols", &self.shape(), &[start, end]));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + end]);
        }
        Ok(self
            .tape
            .push(vec![m, end - start], out, Op::SliceCols(self.id, start)))
    }

    pub fn silu(&self) -> Var<'t> {
        let out = self.value().iter().map(|&x| x * sigmoid(x)).collect();
        self.tape.push(self.shape(), out, Op::Silu(self.id))
    }

    /// Rotates consecutive column pairs of every head by the row's angles.
    pub fn rope(&self, rot: &Arc<Rotation>) -> Result<Var<'t>> {
        let (m, n) = self.dims();
        if rot.rows != m || n % rot.head_dim != 0 {
            return Err(dim_err("rope", &self.shape(), &[rot.rows, rot.head_dim]));
        }
        let out = rot.apply(&self.value(), n, false);
        Ok(self.tape.push(
            self.shape(),
            out,
            Op::Rope {
                x: self.id,
                rot: Arc::clone(rot),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (t, v) = self.dims();
        if targets.len() != t || mask.len() != t {
            return Err(dim_err("cross_entropy", &self.shape(), &[targets.len(), mask.len()]));
        }
        let logits = self.value();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let target = targets[r];
            if target >= v {
                return Err(Error::arg(format!("target {target} outside vocabulary of {v}")));
            }
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let start = probs.len();
            for &x in row {
                let e = (x - max).exp();
                probs.push(e);
                z += e;
            }
            probs[start..].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[target];
            rows.push((r, target));
        }
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let loss = total / rows.len() as f64;
        Ok(self.tape.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                rows,
                probs,
            },
        ))
    }
}
