use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{broadcast_shape, broadcast_zip, gemm, reduce_to, sigmoid, softmax_rows, split_axis};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Counters for expensive sub-computations observed on one tape.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct TapeStats {
    pub ctqw_simulations: usize,
    pub gru_cell_calls: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Sum { input: usize, axis: usize },
    Mean { input: usize, axis: usize },
    SumAll(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { input: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, label: usize, probs: Vec<f64> },
    GatherRows { input: usize, index: Vec<usize> },
    ScatterMatrix { input: usize, positions: Vec<(usize, usize)> },
    DiagEmbed(usize),
    Diagonal(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
///
/// A tape belongs to a single thread; it supports exactly one
/// [`backward`](Tape::backward) call.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    seed: u64,
    dropout_calls: Cell<u64>,
    consumed: Cell<bool>,
    stats: Cell<TapeStats>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(0)
    }
}

impl Tape {
    /// `seed` drives dropout masks; the k-th dropout call on this tape uses
    /// stream k of a ChaCha8 generator seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(512)),
            param_nodes: RefCell::new(HashMap::new()),
            seed,
            dropout_calls: Cell::new(0),
            consumed: Cell::new(false),
            stats: Cell::new(TapeStats::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> TapeStats {
        self.stats.get()
    }

    /// Index of the dropout stream the next dropout call will use.
    pub(crate) fn dropout_position(&self) -> u64 {
        self.dropout_calls.get()
    }

    pub(crate) fn seek_dropout(&self, position: u64) {
        self.dropout_calls.set(position);
    }

    pub(crate) fn bump(&self, f: impl FnOnce(&mut TapeStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node. A tape
    /// must only ever see one store, since nodes are cached by id.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.leaf(store.get(id).clone());
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward called twice on one tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let mut params = HashMap::new();
        for (&pid, &node) in self.param_nodes.borrow().iter() {
            let g = grads
                .get_mut(node)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; nodes[node].value.numel()]);
            params.insert(pid, g);
        }
        let mut leaves = HashMap::new();
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if matches!(nodes[id].op, Op::Leaf) {
                    leaves.insert(id, g);
                }
            }
        }
        Ok(Gradients { params, leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).numel()));
            accumulate(grads, nodes, *b, reduce_to(g, val(*b).numel()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).numel()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, reduce_to(&neg, val(*b).numel()));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if nodes[*a].requires_grad {
                let ga = broadcast_zip(g, vb, |x, y| x * y);
                accumulate(grads, nodes, *a, reduce_to(&ga, va.len()));
            }
            if nodes[*b].requires_grad {
                let gb = broadcast_zip(g, va, |x, y| x * y);
                accumulate(grads, nodes, *b, reduce_to(&gb, vb.len()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if nodes[*a].requires_grad {
                let ga = broadcast_zip(g, vb, |x, y| x / y);
                accumulate(grads, nodes, *a, reduce_to(&ga, va.len()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -out/b
                let q = broadcast_zip(out.data(), vb, |o, y| -o / y);
                let gb: Vec<f64> = g.iter().zip(&q).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, reduce_to(&gb, vb.len()));
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, vb.data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, g, false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let t = Tensor::new(out.shape(), g.to_vec()).transpose();
            accumulate(grads, nodes, *a, t.into_data());
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &input in inputs {
                let width = val(input).shape()[*axis] * inner;
                if nodes[input].requires_grad {
                    let mut gi = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gi.extend_from_slice(&g[base..base + width]);
                    }
                    accumulate(grads, nodes, input, gi);
                }
                offset += width;
            }
        }
        Op::Slice { input, axis, start } => {
            let src = val(*input).shape();
            let (outer, len, inner) = split_axis(src, *axis);
            let width = out.shape()[*axis] * inner;
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                gi[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            accumulate(grads, nodes, *input, gi);
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let (outer, len, inner) = split_axis(val(*input).shape(), *axis);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gi[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *input, gi);
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).numel()]),
        Op::Softmax(a) => {
            let width = *out.shape().last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((y, gr), dst) in out
                .data()
                .chunks(width)
                .zip(g.chunks(width))
                .zip(ga.chunks_mut(width))
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yv), gv) in dst.iter_mut().zip(y).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let width = val(*gamma).numel();
            let gam = val(*gamma).data();
            if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                let mut gg = vec![0.0; width];
                let mut gb = vec![0.0; width];
                for (gr, xr) in g.chunks(width).zip(xhat.chunks(width)) {
                    for j in 0..width {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                accumulate(grads, nodes, *gamma, gg);
                accumulate(grads, nodes, *beta, gb);
            }
            if nodes[*x].requires_grad {
                let w = width as f64;
                let mut gx = vec![0.0; g.len()];
                for (((gr, xr), dst), &s) in g
                    .chunks(width)
                    .zip(xhat.chunks(width))
                    .zip(gx.chunks_mut(width))
                    .zip(inv_std)
                {
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dst[j] = s / w * (w * dxhat[j] - sum - xr[j] * dot);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::Dropout { input, mask } => {
            let gi = g.iter().zip(mask).map(|(a, b)| a * b).collect();
            accumulate(grads, nodes, *input, gi);
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            gl[*label] -= g[0];
            accumulate(grads, nodes, *logits, gl);
        }
        Op::GatherRows { input, index } => {
            let src = val(*input);
            let width = src.numel() / src.shape()[0];
            let mut gi = vec![0.0; src.numel()];
            for (r, &row) in index.iter().enumerate() {
                for j in 0..width {
                    gi[row * width + j] += g[r * width + j];
                }
            }
            accumulate(grads, nodes, *input, gi);
        }
        Op::ScatterMatrix { input, positions } => {
            let cols = out.cols();
            let gi = positions.iter().map(|&(r, c)| g[r * cols + c]).collect();
            accumulate(grads, nodes, *input, gi);
        }
        Op::DiagEmbed(a) => {
            let n = val(*a).numel();
            let gi = (0..n).map(|i| g[i * n + i]).collect();
            accumulate(grads, nodes, *a, gi);
        }
        Op::Diagonal(a) => {
            let n = out.numel();
            let mut gi = vec![0.0; n * n];
            for i in 0..n {
                gi[i * n + i] = g[i];
            }
            accumulate(grads, nodes, *a, gi);
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter bound on the tape; `None` if it was never bound.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient for a leaf created with [`Tape::leaf`] or [`Tape::param`];
    /// zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.leaves.get(&var.id) {
            Some(g) => Tensor::new(&shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds `scale` times every parameter gradient into `acc` (indexed by
    /// `ParamId`), leaving untouched parameters alone.
    pub fn accumulate_into(&self, acc: &mut [Vec<f64>], scale: f64) {
        for (id, g) in &self.params {
            for (a, v) in acc[id.index()].iter_mut().zip(g) {
                *a += scale * v;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "contract violation: operands recorded on different tapes"
        );
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let out = self.with_value(f);
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(out, op, rg)
    }

    fn binary_broadcast(
        self,
        other: Var<'t>,
        name: &str,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Var<'t> {
        self.same_tape(&other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
                panic!(
                    "contract violation: {name} shapes {:?} and {:?} are not broadcast-compatible",
                    a.shape(),
                    b.shape()
                )
            });
            Tensor::new(&shape, broadcast_zip(a.data(), b.data(), f))
        };
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        self.tape.push(out, op(self.id, other.id), rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)
        };
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        self.tape.push(out, Op::MatMul(self.id, other.id), rg)
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |v| v.clone().reshape(shape))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v.map(|x| x + c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.map(|x| if x < 0.0 { 0.0 } else { x }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |v| v.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |v| v.map(f64::tanh))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |v| v.map(f64::exp))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        let bad = self.with_value(|v| v.data().iter().copied().find(|&x| !(x > 0.0)));
        if let Some(x) = bad {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(Op::Log(self.id), |v| v.map(f64::ln)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "contract violation: concat of nothing");
        let tape = parts[0].tape;
        for p in parts {
            parts[0].same_tape(p);
        }
        let out = {
            let nodes = tape.nodes.borrow();
            let first = nodes[parts[0].id].value.shape().to_vec();
            assert!(axis < first.len(), "contract violation: concat axis {axis} for {first:?}");
            let mut shape = first.clone();
            shape[axis] = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
                assert!(
                    compatible,
                    "contract violation: concat shapes {first:?} and {s:?} along axis {axis}"
                );
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let width = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
                }
            }
            Tensor::new(&shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs_grad(&ids);
        tape.push(out, Op::Concat { inputs: ids, axis }, rg)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::Slice { input: self.id, axis, start }, |v| {
            let shape = v.shape();
            assert!(
                axis < shape.len() && start + len <= shape[axis] && len > 0,
                "contract violation: slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            );
            let (outer, full, inner) = split_axis(shape, axis);
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            Tensor::new(&out_shape, data)
        })
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Var<'t> {
        let op = if mean {
            Op::Mean { input: self.id, axis }
        } else {
            Op::Sum { input: self.id, axis }
        };
        self.unary(op, |v| {
            let shape = v.shape();
            assert!(axis < shape.len(), "contract violation: axis {axis} for {shape:?}");
            let (outer, len, inner) = split_axis(shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                data.iter_mut().for_each(|d| *d /= len as f64);
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Tensor::new(&out_shape, data)
        })
    }

    pub fn sum(self, axis: usize) -> Var<'t> {
        self.reduce_axis(axis, false)
    }

    pub fn mean(self, axis: usize) -> Var<'t> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |v| Tensor::scalar(v.data().iter().sum()))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |v| {
            let width = *v.shape().last().expect("softmax of a scalar");
            Tensor::new(v.shape(), softmax_rows(v.data(), width))
        })
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let width = *x.shape().last().expect("layer_norm of a scalar");
            assert!(
                g.shape() == [width] && b.shape() == [width],
                "contract violation: layer_norm of {:?} with scale {:?} and shift {:?}",
                x.shape(),
                g.shape(),
                b.shape()
            );
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.numel() / width);
            let mut out = vec![0.0; x.numel()];
            for ((row, xh), dst) in x
                .data()
                .chunks(width)
                .zip(xhat.chunks_mut(width))
                .zip(out.chunks_mut(width))
            {
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std.push(s);
                for j in 0..width {
                    xh[j] = (row[j] - mean) * s;
                    dst[j] = xh[j] * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape(), out), xhat, inv_std)
        };
        let rg = self.tape.needs_grad(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            rg,
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `train` is false or `p == 0`.
    pub fn dropout(self, p: f64, train: bool) -> Var<'t> {
        assert!((0.0..1.0).contains(&p), "contract violation: dropout rate {p} outside [0, 1)");
        if !train || p == 0.0 {
            return self;
        }
        let call = self.tape.dropout_calls.get();
        self.tape.dropout_calls.set(call + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.tape.seed);
        rng.set_stream(call);
        let keep = 1.0 / (1.0 - p);
        let n = self.with_value(Tensor::numel);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.with_value(|v| {
            Tensor::new(v.shape(), v.data().iter().zip(&mask).map(|(a, b)| a * b).collect())
        });
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(out, Op::Dropout { input: self.id, mask }, rg)
    }

    /// Negative log-likelihood of `label` under softmax(self); self is a
    /// vector of logits (any shape with `C` elements).
    pub fn cross_entropy(self, label: usize) -> Var<'t> {
        let (loss, probs) = self.with_value(|v| {
            let c = v.numel();
            assert!(label < c, "contract violation: label {label} out of range for {c} classes");
            let probs = softmax_rows(v.data(), c);
            let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + v.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            (lse - v.data()[label], probs)
        });
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, label, probs },
            rg,
        )
    }

    /// Rows `index[r]` of a matrix, stacked.
    pub fn gather_rows(self, index: &[usize]) -> Var<'t> {
        let index = index.to_vec();
        let out = self.with_value(|v| {
            let n = v.shape()[0];
            let width = v.numel() / n;
            let mut data = Vec::with_capacity(index.len() * width);
            for &r in &index {
                assert!(r < n, "contract violation: row {r} out of range for {:?}", v.shape());
                data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(&shape, data)
        });
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(out, Op::GatherRows { input: self.id, index }, rg)
    }

    /// Places entry k of a vector at `positions[k]` of a zero
    /// `rows × cols` matrix (duplicates add up).
    pub fn scatter_matrix(self, positions: &[(usize, usize)], rows: usize, cols: usize) -> Var<'t> {
        let positions = positions.to_vec();
        let out = self.with_value(|v| {
            assert_eq!(
                v.numel(),
                positions.len(),
                "contract violation: {} values for {} positions",
                v.numel(),
                positions.len()
            );
            let mut m = Tensor::zeros(&[rows, cols]);
            for (&(r, c), x) in positions.iter().zip(v.data()) {
                assert!(r < rows && c < cols, "contract violation: position ({r},{c}) outside {rows}x{cols}");
                m.data_mut()[r * cols + c] += x;
            }
            m
        });
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(out, Op::ScatterMatrix { input: self.id, positions }, rg)
    }

    /// Square matrix with this vector on its diagonal.
    pub fn diag_embed(self) -> Var<'t> {
        self.unary(Op::DiagEmbed(self.id), |v| {
            let n = v.numel();
            let mut m = Tensor::zeros(&[n, n]);
            for i in 0..n {
                m.data_mut()[i * n + i] = v.data()[i];
            }
            m
        })
    }

    /// Diagonal of a square matrix.
    pub fn diagonal(self) -> Var<'t> {
        self.unary(Op::Diagonal(self.id), |v| {
            let n = v.rows();
            assert_eq!(n, v.cols(), "contract violation: diagonal of {:?}", v.shape());
            Tensor::new(&[n], (0..n).map(|i| v.at(i, i)).collect())
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_broadcast(rhs, "add", Op::Add, |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_broadcast(rhs, "sub", Op::Sub, |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_broadcast(rhs, "mul", Op::Mul, |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_broadcast(rhs, "div", Op::Div, |a, b| a / b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
