use std::cell::RefCell;

use super::graph::Graph;
use super::kernels::{self, check_finite, LayerNormCache};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cache: LayerNormCache,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SqDist(usize, usize),
    Pick(usize, Vec<usize>),
    Sum(usize),
    ClampMax(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order for one reverse sweep.
///
/// Nodes are appended as they are created, so every node's inputs precede it
/// and a reverse scan is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let [r, c] = self.shapes[v.0];
            Tensor::zeros(r, c)
        })
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

    /// A trainable leaf.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        let value = check_finite(op_name, value)?;
        let rg = self.needs(inputs);
        Ok(self.push(value, op, rg))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    /// Runs the reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let shape = nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        macro_rules! acc {
            ($i:expr, $t:expr) => {{
                let contrib = $t;
                accumulate(&mut grads[$i], contrib);
            }};
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let value_of = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc!(*a, kernels::gemm(&g, false, value_of(*b), true)?);
                    }
                    if wants(*b) {
                        acc!(*b, kernels::gemm(value_of(*a), true, &g, false)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if wants(*a) {
                        acc!(*a, kernels::gemm(&g, false, value_of(*b), false)?);
                    }
                    if wants(*b) {
                        acc!(*b, kernels::gemm(&g, true, value_of(*a), false)?);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc!(*b, g.clone());
                    }
                    if wants(*a) {
                        acc!(*a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        acc!(*row, kernels::col_sums(&g));
                    }
                    if wants(*a) {
                        acc!(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc!(*a, kernels::zip_map("mul", &g, value_of(*b), |x, y| x * y)?);
                    }
                    if wants(*b) {
                        acc!(*b, kernels::zip_map("mul", &g, value_of(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc!(*a, g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let d = kernels::zip_map("gelu", &g, value_of(*a), |gv, x| {
                        gv * kernels::gelu_grad_scalar(x)
                    })?;
                    acc!(*a, d);
                }
                Op::Softmax(a) => {
                    acc!(*a, kernels::softmax_rows_backward(&node.value, &g));
                }
                Op::LogSoftmax(a) => {
                    acc!(*a, kernels::log_softmax_rows_backward(&node.value, &g));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let (dx, dgain, dbias) =
                        kernels::layer_norm_backward(cache, value_of(*gain), &g);
                    if wants(*x) {
                        acc!(*x, dx);
                    }
                    if wants(*gain) {
                        acc!(*gain, dgain);
                    }
                    if wants(*bias) {
                        acc!(*bias, dbias);
                    }
                }
                Op::SliceCols { src, start } => {
                    let [r, c] = value_of(*src).shape();
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc!(*src, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = value_of(p).cols();
                        if wants(p) {
                            acc!(p, kernels::slice_cols(&g, offset, w)?);
                        }
                        offset += w;
                    }
                }
                Op::SqDist(a, b) => {
                    let (da, db) = kernels::sq_dist_backward(value_of(*a), value_of(*b), &g);
                    if wants(*a) {
                        acc!(*a, da);
                    }
                    if wants(*b) {
                        acc!(*b, db);
                    }
                }
                Op::Pick(a, idx) => {
                    let [r, c] = value_of(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        d.set(i, j, g.get(i, 0));
                    }
                    acc!(*a, d);
                }
                Op::Sum(a) => {
                    let [r, c] = value_of(*a).shape();
                    acc!(*a, Tensor::filled(r, c, g.item()));
                }
                Op::ClampMax(a, cap) => {
                    let cap = *cap;
                    let d = kernels::zip_map("clamp_max", &g, value_of(*a), |gv, x| {
                        if x < cap {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    acc!(*a, d);
                }
            }
        }

        // Only leaves keep their gradients; intermediate slots were consumed.
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn value(&self, n: &Var) -> Tensor {
        self.with1(*n, Tensor::clone)
    }

    fn shape(&self, n: &Var) -> [usize; 2] {
        self.with1(*n, Tensor::shape)
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.with2(*a, *b, |x, y| kernels::gemm(x, false, y, false))?;
        self.record("matmul", v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn matmul_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.with2(*a, *b, |x, y| kernels::gemm(x, false, y, true))?;
        self.record("matmul_nt", v, Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.with2(*a, *b, |x, y| kernels::zip_map("add", x, y, |p, q| p + q))?;
        self.record("add", v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    fn add_row(&self, a: &Var, row: &Var) -> Result<Var> {
        let v = self.with2(*a, *row, kernels::add_row)?;
        self.record("add_row", v, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.with2(*a, *b, |x, y| kernels::zip_map("mul", x, y, |p, q| p * q))?;
        self.record("mul", v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    fn scale(&self, a: &Var, s: f64) -> Result<Var> {
        let v = self.with1(*a, |x| x.map(|e| e * s));
        self.record("scale", v, Op::Scale(a.0, s), &[a.0])
    }

    fn gelu(&self, a: &Var) -> Result<Var> {
        let v = self.with1(*a, |x| x.map(kernels::gelu_scalar));
        self.record("gelu", v, Op::Gelu(a.0), &[a.0])
    }

    fn softmax_rows(&self, a: &Var) -> Result<Var> {
        let v = self.with1(*a, kernels::softmax_rows);
        self.record("softmax_rows", v, Op::Softmax(a.0), &[a.0])
    }

    fn log_softmax_rows(&self, a: &Var) -> Result<Var> {
        let v = self.with1(*a, kernels::log_softmax_rows);
        self.record("log_softmax_rows", v, Op::LogSoftmax(a.0), &[a.0])
    }

    fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (v, cache) = {
            let nodes = self.nodes.borrow();
            kernels::layer_norm(&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value, eps)?
        };
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            cache,
        };
        self.record("layer_norm", v, op, &[x.0, gain.0, bias.0])
    }

    fn slice_cols(&self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with1(*a, |x| kernels::slice_cols(x, start, len))?;
        self.record("slice_cols", v, Op::SliceCols { src: a.0, start }, &[a.0])
    }

    fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            kernels::concat_cols(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.record("concat_cols", v, Op::ConcatCols(ids.clone()), &ids)
    }

    fn sq_dist(&self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.with2(*a, *b, kernels::sq_dist)?;
        self.record("sq_dist", v, Op::SqDist(a.0, b.0), &[a.0, b.0])
    }

    fn pick(&self, a: &Var, idx: &[usize]) -> Result<Var> {
        let v = self.with1(*a, |x| kernels::pick(x, idx))?;
        self.record("pick", v, Op::Pick(a.0, idx.to_vec()), &[a.0])
    }

    fn sum(&self, a: &Var) -> Result<Var> {
        let v = self.with1(*a, |x| Tensor::scalar(x.sum()));
        self.record("sum", v, Op::Sum(a.0), &[a.0])
    }

    fn clamp_max(&self, a: &Var, cap: f64) -> Result<Var> {
        if cap.is_nan() {
            return Err(TensorError::Usage("clamp_max with NaN cap".into()));
        }
        let v = self.with1(*a, |x| x.map(|e| e.min(cap)));
        self.record("clamp_max", v, Op::ClampMax(a.0, cap), &[a.0])
    }
}
