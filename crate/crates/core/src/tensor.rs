//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Every trainable computation in the engine is recorded on a [`Tape`]:
//! leaves hold parameters or constants, every op appends a node whose
//! parents precede it, so the node order is already a topological order.
//! [`Tape::backward`] walks that order once in reverse and accumulates
//! gradients into every node that (transitively) depends on a parameter.
//!
//! Values are 64-bit internally. Any op that produces a non-finite entry
//! fails with [`TensorError::NonFinite`] instead of silently poisoning the
//! rest of the graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Owned row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} needs {} entries, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `out[i] = big[i] + small[i % small.len()]`
    Add { big: Var, small: Var },
    Mul { big: Var, small: Var },
    Scale(Var, f64),
    AddN(Vec<Var>),
    Concat { parts: Vec<Var>, axis: usize },
    Stack(Vec<Var>),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participates in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, parents: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    /// `[m×k]·[k×n] → [m×n]`; a 1-D left operand `[k]` is a row vector and
    /// yields `[n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, vector_lhs) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if vector_lhs { vec![n] } else { vec![m, n] };
        self.record("matmul", Tensor { shape, data: out }, &[a, b], Op::MatMul(a, b))
    }

    /// Elementwise add. The smaller operand broadcasts over the leading
    /// dimensions of the larger one (or is a single-element scalar).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let bd = self.value(big).data();
        let sd = self.value(small).data();
        let p = sd.len();
        let data: Vec<f64> = bd.iter().enumerate().map(|(i, x)| x + sd[i % p]).collect();
        let shape = self.shape(big).to_vec();
        self.record("add", Tensor { shape, data }, &[big, small], Op::Add { big, small })
    }

    /// Elementwise multiply with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let bd = self.value(big).data();
        let sd = self.value(small).data();
        let p = sd.len();
        let data: Vec<f64> = bd.iter().enumerate().map(|(i, x)| x * sd[i % p]).collect();
        let shape = self.shape(big).to_vec();
        self.record("mul", Tensor { shape, data }, &[big, small], Op::Mul { big, small })
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let fits = |big: &[usize], small: &[usize]| {
            small.iter().product::<usize>() == 1 || (small.len() <= big.len() && big.ends_with(small))
        };
        if fits(sa, sb) {
            Ok((a, b))
        } else if fits(sb, sa) {
            Ok((b, a))
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    pub fn scale(&mut self, v: Var, factor: f64) -> Result<Var> {
        let t = self.value(v);
        let data = t.data.iter().map(|x| x * factor).collect();
        let shape = t.shape.clone();
        self.record("scale", Tensor { shape, data }, &[v], Op::Scale(v, factor))
    }

    /// Sum of same-shaped values.
    pub fn add_n(&mut self, values: &[Var]) -> Result<Var> {
        let first = *values.first().ok_or_else(|| invalid("add_n", "empty input"))?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for &v in values {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err("add_n", &shape, self.shape(v)));
            }
            for (o, x) in data.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        self.record("add_n", Tensor { shape, data }, values, Op::AddN(values.to_vec()))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "empty input"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {} out of range for {:?}", axis, base)));
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * axis_len * base[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.len() / outer;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        self.record("concat", Tensor { shape, data }, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Stack same-shaped values along a new leading axis.
    pub fn stack(&mut self, values: &[Var]) -> Result<Var> {
        let first = *values.first().ok_or_else(|| invalid("stack", "empty input"))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(values.len() * self.value(first).len());
        for &v in values {
            if self.shape(v) != inner.as_slice() {
                return Err(shape_err("stack", &inner, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![values.len()];
        shape.extend(inner);
        self.record("stack", Tensor { shape, data }, values, Op::Stack(values.to_vec()))
    }

    pub fn sigmoid(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        self.record("sigmoid", Tensor { shape, data }, &[v], Op::Sigmoid(v))
    }

    pub fn relu(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let data = t.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape.clone();
        self.record("relu", Tensor { shape, data }, &[v], Op::Relu(v))
    }

    pub fn log(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let data = t.data.iter().map(|&x| x.ln()).collect();
        let shape = t.shape.clone();
        self.record("log", Tensor { shape, data }, &[v], Op::Log(v))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.shape.len() != 1 {
            return Err(invalid("softmax", format!("expected 1-D input, got {:?}", t.shape)));
        }
        let data = softmax(&t.data);
        let shape = t.shape.clone();
        self.record("softmax", Tensor { shape, data }, &[v], Op::Softmax(v))
    }

    /// Column-wise maximum of an `[n×d]` matrix; ties go to the lowest row.
    pub fn max_rows(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let (n, d) = rows_cols("max_rows", &t.shape)?;
        let mut out = t.data[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..n {
            let row = &t.data[r * d..(r + 1) * d];
            for c in 0..d {
                if row[c] > out[c] {
                    out[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        self.record("max_rows", Tensor::vector(out), &[v], Op::MaxRows { input: v, argmax })
    }

    /// Column-wise mean of an `[n×d]` matrix.
    pub fn mean_rows(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let (n, d) = rows_cols("mean_rows", &t.shape)?;
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(&t.data[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        self.record("mean_rows", Tensor::vector(out), &[v], Op::MeanRows(v))
    }

    /// Elementwise max over a non-empty set of same-shaped vectors.
    pub fn max_pool_set(&mut self, values: &[Var]) -> Result<Var> {
        if values.is_empty() {
            return Err(invalid("max_pool_set", "empty set"));
        }
        let stacked = self.stack(values)?;
        self.max_rows(stacked)
    }

    /// Elementwise mean over a non-empty set of same-shaped vectors.
    pub fn mean_pool_set(&mut self, values: &[Var]) -> Result<Var> {
        if values.is_empty() {
            return Err(invalid("mean_pool_set", "empty set"));
        }
        let stacked = self.stack(values)?;
        self.mean_rows(stacked)
    }

    pub fn sum(&mut self, v: Var) -> Result<Var> {
        let s = self.value(v).data.iter().sum();
        self.record("sum", Tensor::scalar(s), &[v], Op::Sum(v))
    }

    /// Softmax cross-entropy of 1-D logits against a class index, computed
    /// with the log-sum-exp shift.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.shape.len() != 1 {
            return Err(invalid("cross_entropy", format!("expected 1-D logits, got {:?}", t.shape)));
        }
        if target >= t.len() {
            return Err(invalid("cross_entropy", format!("target {} out of range for {} classes", target, t.len())));
        }
        let max = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data[target];
        let probs = softmax(&t.data);
        self.record(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, target, probs },
        )
    }

    /// Reverse pass from a single-element root. May run once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(invalid("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape[0], tb.shape[1]);
                let m = ta.len() / k;
                self.accumulate(grads, *a, |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for (p, slot) in ga[i * k..(i + 1) * k].iter_mut().enumerate() {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            *slot += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ta.data[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (slot, x) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *slot += a_ip * x;
                            }
                        }
                    }
                });
            }
            Op::Add { big, small } => {
                self.accumulate(grads, *big, |gb| add_into(gb, g));
                self.accumulate(grads, *small, |gs| {
                    let p = gs.len();
                    for (i, x) in g.iter().enumerate() {
                        gs[i % p] += x;
                    }
                });
            }
            Op::Mul { big, small } => {
                let (tb, ts) = (self.value(*big), self.value(*small));
                let p = ts.len();
                self.accumulate(grads, *big, |gb| {
                    for (i, slot) in gb.iter_mut().enumerate() {
                        *slot += g[i] * ts.data[i % p];
                    }
                });
                self.accumulate(grads, *small, |gs| {
                    for (i, x) in g.iter().enumerate() {
                        gs[i % p] += x * tb.data[i];
                    }
                });
            }
            Op::Scale(v, factor) => {
                self.accumulate(grads, *v, |gv| {
                    for (slot, x) in gv.iter_mut().zip(g) {
                        *slot += x * factor;
                    }
                });
            }
            Op::AddN(values) => {
                for v in values {
                    self.accumulate(grads, *v, |gv| add_into(gv, g));
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let row = out.len() / outer;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).len() / outer;
                    self.accumulate(grads, *p, |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * chunk..(o + 1) * chunk],
                                &g[o * row + offset..o * row + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Stack(values) => {
                let chunk = out.len() / values.len().max(1);
                for (r, v) in values.iter().enumerate() {
                    self.accumulate(grads, *v, |gv| add_into(gv, &g[r * chunk..(r + 1) * chunk]));
                }
            }
            Op::Sigmoid(v) => {
                self.accumulate(grads, *v, |gv| {
                    for ((slot, x), y) in gv.iter_mut().zip(g).zip(&out.data) {
                        *slot += x * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(v) => {
                let input = self.value(*v);
                self.accumulate(grads, *v, |gv| {
                    for ((slot, x), u) in gv.iter_mut().zip(g).zip(&input.data) {
                        if *u > 0.0 {
                            *slot += x;
                        }
                    }
                });
            }
            Op::Log(v) => {
                let input = self.value(*v);
                self.accumulate(grads, *v, |gv| {
                    for ((slot, x), u) in gv.iter_mut().zip(g).zip(&input.data) {
                        *slot += x / u;
                    }
                });
            }
            Op::Softmax(v) => {
                let dot: f64 = g.iter().zip(&out.data).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *v, |gv| {
                    for ((slot, x), y) in gv.iter_mut().zip(g).zip(&out.data) {
                        *slot += y * (x - dot);
                    }
                });
            }
            Op::MaxRows { input, argmax } => {
                let d = argmax.len();
                self.accumulate(grads, *input, |gi| {
                    for (c, &r) in argmax.iter().enumerate() {
                        gi[r * d + c] += g[c];
                    }
                });
            }
            Op::MeanRows(v) => {
                let d = out.len();
                let n = self.value(*v).len() / d;
                let inv = 1.0 / n as f64;
                self.accumulate(grads, *v, |gv| {
                    for r in 0..n {
                        for c in 0..d {
                            gv[r * d + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::Sum(v) => {
                self.accumulate(grads, *v, |gv| gv.iter_mut().for_each(|slot| *slot += g[0]));
            }
            Op::CrossEntropy { logits, target, probs } => {
                self.accumulate(grads, *logits, |gl| {
                    for (c, (slot, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if c == *target { 1.0 } else { 0.0 };
                        *slot += g[0] * (p - onehot);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * x;
            }
        }
    }
    out
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, d] if *n > 0 => Ok((*n, *d)),
        _ => Err(invalid(op, format!("expected non-empty [n×d] input, got {:?}", shape))),
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically shifted softmax of a plain slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the largest
/// `|analytic − numeric| / max(1, |numeric|)` over all parameter entries.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_step(f, params, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for e in 0..params[pi].len() {
            let orig = params[pi].data[e];
            probe[pi].data[e] = orig + step;
            let plus = eval(&probe)?;
            probe[pi].data[e] = orig - step;
            let minus = eval(&probe)?;
            probe[pi].data[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
