//! Wengert tape: ops are recorded in construction order (so every node's
//! inputs precede it) and replayed once in reverse by [`Tape::backward`].
//!
//! Construction and backward are single-threaded per tape; a tape is a
//! cheap, short-lived object built once per forward/backward step.

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Op with a bespoke backward rule, recorded from outside this module.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Accumulate input gradients into `input_grads` (zero-initialized,
    /// aligned with `inputs()`), given the upstream gradient `out_grad`.
    fn backward(
        &self,
        values: &dyn Fn(Var) -> Tensor,
        out_grad: &[f64],
        input_grads: &mut [Vec<f64>],
    );
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// rhs shape is a suffix of lhs shape.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    /// rhs shape is a suffix of lhs shape.
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// Batched matmul over the leading axis.
    Bmm(Var, Var),
    Kron(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    /// Normalization over the last axis, pre-affine.
    LayerNorm(Var, f64),
    Gelu(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
    Narrow(Var, usize, usize, usize),
    /// (tokens[b,t,d], token[d]) -> [b,t+1,d].
    PrependToken(Var, Var),
    /// [b,t,d] -> [b,d] at a fixed token index.
    TakeToken(Var, usize),
    /// (table[n], flat indices, out shape) -> out.
    Gather(Var, Vec<usize>),
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bytes: usize,
    peak_bytes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total bytes of tensor payload currently recorded.
    pub fn live_bytes(&self) -> usize {
        self.bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Record a leaf; gradient participation follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Clone a tensor onto the tape as a trainable leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Clone a tensor onto the tape as a frozen leaf.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.bytes += value.numel() * std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(self.bytes);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── binary ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.is_empty() || sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let bn = self.nodes[b.0].value.numel();
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.nodes[b.0].value.data()[i % bn])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s (affine gain).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let bn = self.nodes[b.0].value.numel();
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.nodes[b.0].value.data()[i % bn])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|x| x * factor)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Matmul(a, b), rg))
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            kernels::matmul_acc(
                &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![bsz, m, n], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Bmm(a, b), rg))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "kron",
                expected: 2,
                shape: sa,
            });
        }
        if sb.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "kron",
                expected: 2,
                shape: sb,
            });
        }
        let (m, n, p, q) = (sa[0], sa[1], sb[0], sb[1]);
        let data = kernels::kron(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            n,
            p,
            q,
        );
        let t = Tensor::new(vec![m * p, n * q], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Kron(a, b), rg))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of axes for shape {shape:?}"),
            });
        }
        let (data, out_shape) = permute_copy(self.nodes[a.0].value.data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: self.shape(a).to_vec(),
            });
        }
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(TensorError::ElementCount {
                count: self.nodes[a.0].value.numel(),
                shape,
            });
        }
        let t = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                shape,
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!(
                    "range {start}..{} exceeds axis {axis} of shape {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Narrow(a, axis, start, len), rg))
    }

    // ── nonlinearities / reductions ─────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = src.to_vec();
        if inner == 1 {
            kernels::softmax_rows(&mut data, len);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (src[at(j)] - max).exp();
                        data[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        data[at(j)] /= sum;
                    }
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    /// Normalize the last axis to zero mean / unit variance (pre-affine).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "layernorm",
                expected: 1,
                shape,
            });
        }
        let len = *shape.last().unwrap();
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks(len).zip(data.chunks_mut(len)) {
            let mean = row_in.iter().sum::<f64>() / len as f64;
            let var = row_in.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mean) * inv;
            }
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::LayerNorm(a, eps), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Log-softmax + negative log-likelihood, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape,
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let src = self.nodes[logits.0].value.data();
        let mut loss = 0.0;
        for (row, &label) in src.chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= b as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    // ── token ops (ViT plumbing) ────────────────────────────────────

    /// Prepend a shared token to every sequence: `([b,t,d], [d]) -> [b,t+1,d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let st = self.shape(token).to_vec();
        if sx.len() != 3 || st != [sx[2]] {
            return Err(TensorError::ShapeMismatch {
                op: "prepend_token",
                lhs: sx,
                rhs: st,
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let tok = self.nodes[token.0].value.data().to_vec();
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for i in 0..b {
            data.extend_from_slice(&tok);
            data.extend_from_slice(&src[i * t * d..(i + 1) * t * d]);
        }
        let out = Tensor::new(vec![b, t + 1, d], data)?;
        let rg = self.requires(x) || self.requires(token);
        Ok(self.push(out, Op::PrependToken(x, token), rg))
    }

    /// Select one token per sequence: `[b,t,d] -> [b,d]`.
    pub fn take_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "take_token",
                expected: 3,
                shape: sx,
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        if index >= t {
            return Err(TensorError::InvalidAxis {
                op: "take_token",
                axis: index,
                shape: sx,
            });
        }
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let base = (i * t + index) * d;
            data.extend_from_slice(&src[base..base + d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::TakeToken(x, index), rg))
    }

    /// Index a rank-1 table: `out[i] = table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], out_shape: Vec<usize>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "gather",
                expected: 1,
                shape: st,
            });
        }
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(TensorError::ElementCount {
                count: indices.len(),
                shape: out_shape,
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for table of {}", st[0]),
            });
        }
        let src = self.nodes[table.0].value.data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.requires(table);
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Record an externally computed op with its own backward rule.
    pub fn custom(&mut self, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = op.inputs().iter().any(|&v| self.requires(v));
        self.push(value, Op::Custom(op), rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `loss`; gradients accumulate
    /// additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut finals: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            finals[id] = Some(g);
        }

        for (node, fg) in self.nodes.iter_mut().zip(finals) {
            if node.value.requires_grad {
                if let Some(g) = fg {
                    node.value.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let data = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gb = grad_buf(grads, v, numel(v));
                        for (o, &x) in gb.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    let gb = grad_buf(grads, *a, numel(*a));
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs(*b) {
                    let bn = numel(*b);
                    let gb = grad_buf(grads, *b, bn);
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % bn] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bd = data(*b);
                    let gb = grad_buf(grads, *a, numel(*a));
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let ad = data(*a);
                    let gb = grad_buf(grads, *b, numel(*b));
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let bn = numel(*b);
                if needs(*a) {
                    let bd = data(*b);
                    let gb = grad_buf(grads, *a, numel(*a));
                    for (i, (o, &x)) in gb.iter_mut().zip(g).enumerate() {
                        *o += x * bd[i % bn];
                    }
                }
                if needs(*b) {
                    let ad = data(*a);
                    let gb = grad_buf(grads, *b, bn);
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % bn] += x * ad[i];
                    }
                }
            }
            Op::Scale(a, factor) => {
                if needs(*a) {
                    let f = *factor;
                    let gb = grad_buf(grads, *a, numel(*a));
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o += f * x;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    kernels::matmul_bt_acc(g, data(*b), grad_buf(grads, *a, m * k), m, k, n);
                }
                if needs(*b) {
                    kernels::matmul_at_acc(data(*a), g, grad_buf(grads, *b, k * n), m, k, n);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                if needs(*a) {
                    let bd = data(*b);
                    let gb = grad_buf(grads, *a, bsz * m * k);
                    for i in 0..bsz {
                        kernels::matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut gb[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if needs(*b) {
                    let ad = data(*a);
                    let gb = grad_buf(grads, *b, bsz * k * n);
                    for i in 0..bsz {
                        kernels::matmul_at_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Kron(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (p, q) = (self.shape(*b)[0], self.shape(*b)[1]);
                let cols = n * q;
                if needs(*a) {
                    let bd = data(*b);
                    let gb = grad_buf(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            let mut s = 0.0;
                            for r in 0..p {
                                let g_row = (i * p + r) * cols + j * q;
                                for t in 0..q {
                                    s += g[g_row + t] * bd[r * q + t];
                                }
                            }
                            gb[i * n + j] += s;
                        }
                    }
                }
                if needs(*b) {
                    let ad = data(*a);
                    let gb = grad_buf(grads, *b, p * q);
                    for i in 0..m {
                        for j in 0..n {
                            let a_ij = ad[i * n + j];
                            for r in 0..p {
                                let g_row = (i * p + r) * cols + j * q;
                                for t in 0..q {
                                    gb[r * q + t] += a_ij * g[g_row + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                if needs(*a) {
                    let out_shape: Vec<usize> =
                        perm.iter().map(|&p| self.shape(*a)[p]).collect();
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (gp, _) = permute_copy(g, &out_shape, &inv);
                    let gb = grad_buf(grads, *a, numel(*a));
                    for (o, x) in gb.iter_mut().zip(gp) {
                        *o += x;
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let gb = grad_buf(grads, *a, numel(*a));
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Narrow(a, axis, start, len) => {
                if needs(*a) {
                    let shape = self.shape(*a);
                    let (outer, axis_len, inner) = split_axis(shape, *axis);
                    let gb = grad_buf(grads, *a, numel(*a));
                    for o in 0..outer {
                        let dst = o * axis_len * inner + start * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gb[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if needs(*a) {
                    let shape = self.shape(*a);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let y = self.nodes[id].value.data();
                    let gb = grad_buf(grads, *a, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                gb[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm(a, eps) => {
                if needs(*a) {
                    let len = *self.shape(*a).last().unwrap();
                    let x = data(*a);
                    let gb = grad_buf(grads, *a, x.len());
                    for r in 0..x.len() / len {
                        let row = &x[r * len..(r + 1) * len];
                        let g_row = &g[r * len..(r + 1) * len];
                        let mean = row.iter().sum::<f64>() / len as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = g_row.iter().sum::<f64>() / len as f64;
                        let mut gy = 0.0;
                        for (gv, &xv) in g_row.iter().zip(row) {
                            gy += gv * (xv - mean) * inv;
                        }
                        gy /= len as f64;
                        for ((o, &gv), &xv) in
                            gb[r * len..(r + 1) * len].iter_mut().zip(g_row).zip(row)
                        {
                            let y = (xv - mean) * inv;
                            *o += inv * (gv - g_mean - y * gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = data(*a);
                    let gb = grad_buf(grads, *a, x.len());
                    for ((o, &gv), &xv) in gb.iter_mut().zip(g).zip(x) {
                        *o += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let g0 = g[0];
                    let gb = grad_buf(grads, *a, numel(*a));
                    for o in gb.iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::CrossEntropy(logits, labels) => {
                if needs(*logits) {
                    let shape = self.shape(*logits);
                    let (b, c) = (shape[0], shape[1]);
                    let x = data(*logits);
                    let g0 = g[0] / b as f64;
                    let gb = grad_buf(grads, *logits, b * c);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x[r * c..(r + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gb[r * c + j] += g0 * (p - onehot);
                        }
                    }
                }
            }
            Op::PrependToken(x, token) => {
                let sx = self.shape(*x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                if needs(*x) {
                    let gb = grad_buf(grads, *x, b * t * d);
                    for i in 0..b {
                        let src = (i * (t + 1) + 1) * d;
                        for j in 0..t * d {
                            gb[i * t * d + j] += g[src + j];
                        }
                    }
                }
                if needs(*token) {
                    let gb = grad_buf(grads, *token, d);
                    for i in 0..b {
                        let src = i * (t + 1) * d;
                        for j in 0..d {
                            gb[j] += g[src + j];
                        }
                    }
                }
            }
            Op::TakeToken(x, index) => {
                if needs(*x) {
                    let sx = self.shape(*x);
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let gb = grad_buf(grads, *x, b * t * d);
                    for i in 0..b {
                        let dst = (i * t + index) * d;
                        for j in 0..d {
                            gb[dst + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::Gather(table, indices) => {
                if needs(*table) {
                    let gb = grad_buf(grads, *table, numel(*table));
                    for (&idx, &gv) in indices.iter().zip(g) {
                        gb[idx] += gv;
                    }
                }
            }
            Op::Custom(op) => {
                let inputs = op.inputs();
                let mut bufs: Vec<Vec<f64>> =
                    inputs.iter().map(|&v| vec![0.0; numel(v)]).collect();
                let values = |v: Var| self.nodes[v.0].value.clone();
                op.backward(&values, g, &mut bufs);
                for (&v, contrib) in inputs.iter().zip(bufs) {
                    if needs(v) {
                        let gb = grad_buf(grads, v, numel(v));
                        for (o, x) in gb.iter_mut().zip(contrib) {
                            *o += x;
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// (outer, len, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coord = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        // odometer increment over out_shape, tracking the source offset
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            src += src_strides[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            src -= src_strides[axis] * out_shape[axis];
            coord[axis] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Loss = sum(out * w) for fixed pseudo-random weights, so every output
    /// coordinate contributes a distinct gradient signal.
    fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let n = tape.value(out).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let wt = tape.constant(&Tensor::new(tape.shape(out).to_vec(), w).unwrap());
        let prod = tape.mul(out, wt).unwrap();
        tape.sum(prod)
    }

    /// Check analytic vs central-difference gradients for every input.
    fn grad_check<F>(inputs: &[Tensor], tol: f64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();

        for (i, x) in inputs.iter().enumerate() {
            let fd = finite_diff_grad(
                &mut |probe| {
                    let mut t = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, orig)| t.constant(if j == i { probe } else { orig }))
                        .collect();
                    let loss = build(&mut t, &vars);
                    t.value(loss).item()
                },
                x,
                1e-5,
            );
            for (k, (&a, &f)) in analytic[i].iter().zip(fd.data()).enumerate() {
                let denom = a.abs().max(f.abs()).max(1e-3);
                assert!(
                    (a - f).abs() / denom <= tol,
                    "input {i} coord {k}: analytic {a} vs fd {f} (tol {tol})"
                );
            }
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::from_rows(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
        ]));
        let b = Tensor::from_rows(&[&[2.0, -1.0], &[0.5, 3.0], &[7.0, 0.0]]);
        let bv = tape.leaf(b.clone());
        let c = tape.matmul(eye, bv).unwrap();
        assert_eq!(tape.value(c).data(), b.data());
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        grad_check(&[a, b], 1e-6, |tape, vars| {
            let c = tape.matmul(vars[0], vars[1]).unwrap();
            let s = tape.sum(c);
            s
        });
    }

    #[test]
    fn kron_scalar_one_is_identity() {
        let mut tape = Tape::new();
        let one = tape.leaf(Tensor::from_rows(&[&[1.0]]));
        let b = Tensor::from_rows(&[&[4.0, 5.0], &[6.0, 7.0]]);
        let bv = tape.leaf(b.clone());
        let c = tape.kron(one, bv).unwrap();
        assert_eq!(tape.value(c).data(), b.data());
        assert_eq!(tape.shape(c), &[2, 2]);
    }

    #[test]
    fn kron_scalar_scales() {
        let mut tape = Tape::new();
        let two = tape.leaf(Tensor::from_rows(&[&[2.0]]));
        let eye = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.kron(two, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn kron_hand_block_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let c = tape.kron(a, b).unwrap();
        let expect = [
            0.0, 1.0, 0.0, 2.0, //
            1.0, 0.0, 2.0, 0.0, //
            0.0, 3.0, 0.0, 4.0, //
            3.0, 0.0, 4.0, 0.0,
        ];
        assert_eq!(tape.value(c).data(), &expect);
    }

    #[test]
    fn kron_rank_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.kron(a, b),
            Err(TensorError::RankMismatch { op: "kron", .. })
        ));
    }

    #[test]
    fn kron_mixed_product_property() {
        // (A ⊗ B)(C ⊗ D) = (AC) ⊗ (BD)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 2], &mut rng);
        let c = rand_tensor(&[3, 2], &mut rng);
        let d = rand_tensor(&[2, 4], &mut rng);
        let lhs = a.kron(&b).unwrap().matmul(&c.kron(&d).unwrap()).unwrap();
        let rhs = a.matmul(&c).unwrap().kron(&b.matmul(&d).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_grad_and_finite_diff_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[3, 2], &mut rng);
        grad_check(&[a, b], 1e-5, |tape, vars| {
            let c = tape.kron(vars[0], vars[1]).unwrap();
            weighted_loss(tape, c, 42)
        });
    }

    #[test]
    fn softmax_singleton_and_symmetry() {
        let mut tape = Tape::new();
        let single = tape.leaf(Tensor::new(vec![1], vec![3.7]).unwrap());
        let s = tape.softmax(single, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);

        let pair = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(pair, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form_two_thirds() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0f64.ln(), 1.0f64.ln()]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let out = tape.value(s).data();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[4, 7], &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax(v, 1).unwrap();
        for row in tape.value(s).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 10] {
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::zeros(vec![3, c]));
            let loss = tape.cross_entropy(logits, &[0, c - 1, c / 2]).unwrap();
            assert!((tape.value(loss).item() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[1, 4]),
            Err(TensorError::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 8], 3.25));
        let y = tape.layernorm(x, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn gelu_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let data = vec![1.0, -2.0, 0.5, 4.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], data.clone()).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.iter().zip(&data) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(x) + sum(x) => grad = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let pair = tape.add(s1, s2).unwrap();
        tape.backward(pair).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn finite_diff_agrees_with_backward_on_kron_composed_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = rand_tensor(&[2, 2], &mut rng);
        let u = rand_tensor(&[3, 1], &mut rng);
        let v = rand_tensor(&[1, 3], &mut rng);
        grad_check(&[a, u, v], 1e-5, |tape, vars| {
            let uv = tape.matmul(vars[1], vars[2]).unwrap();
            let c = tape.kron(vars[0], uv).unwrap();
            let sm = tape.softmax(c, 1).unwrap();
            weighted_loss(tape, sm, 99)
        });
    }

    #[test]
    fn nonlinear_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&[3, 5], &mut rng);
        grad_check(&[x.clone()], 1e-4, |tape, vars| {
            let y = tape.gelu(vars[0]);
            weighted_loss(tape, y, 1)
        });
        grad_check(&[x.clone()], 1e-4, |tape, vars| {
            let y = tape.layernorm(vars[0], 1e-5).unwrap();
            weighted_loss(tape, y, 2)
        });
        grad_check(&[x.clone()], 1e-4, |tape, vars| {
            let y = tape.softmax(vars[0], 1).unwrap();
            weighted_loss(tape, y, 3)
        });
        grad_check(&[x], 1e-4, |tape, vars| {
            tape.cross_entropy(vars[0], &[4, 0, 2]).unwrap()
        });
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        grad_check(&[x.clone()], 1e-6, |tape, vars| {
            let y = tape.permute(vars[0], &[2, 0, 1]).unwrap();
            weighted_loss(tape, y, 4)
        });
        grad_check(&[x.clone()], 1e-6, |tape, vars| {
            let y = tape.reshape(vars[0], vec![6, 4]).unwrap();
            weighted_loss(tape, y, 5)
        });
        grad_check(&[x.clone()], 1e-6, |tape, vars| {
            let y = tape.narrow(vars[0], 1, 1, 2).unwrap();
            weighted_loss(tape, y, 6)
        });
        let tok = rand_tensor(&[4], &mut rng);
        grad_check(&[x.clone(), tok], 1e-6, |tape, vars| {
            let y = tape.prepend_token(vars[0], vars[1]).unwrap();
            weighted_loss(tape, y, 7)
        });
        grad_check(&[x], 1e-6, |tape, vars| {
            let y = tape.take_token(vars[0], 2).unwrap();
            weighted_loss(tape, y, 8)
        });
    }

    #[test]
    fn bmm_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = rand_tensor(&[3, 2, 4], &mut rng);
        let b = rand_tensor(&[3, 4, 2], &mut rng);
        grad_check(&[a.clone(), b], 1e-6, |tape, vars| {
            let c = tape.bmm(vars[0], vars[1]).unwrap();
            weighted_loss(tape, c, 9)
        });
        let bias = rand_tensor(&[4], &mut rng);
        grad_check(&[a.clone(), bias.clone()], 1e-6, |tape, vars| {
            let c = tape.add_broadcast(vars[0], vars[1]).unwrap();
            weighted_loss(tape, c, 10)
        });
        grad_check(&[a, bias], 1e-5, |tape, vars| {
            let c = tape.mul_broadcast(vars[0], vars[1]).unwrap();
            weighted_loss(tape, c, 11)
        });
    }

    #[test]
    fn gather_gradient_scatters() {
        let table = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        grad_check(&[table], 1e-6, |tape, vars| {
            let y = tape.gather(vars[0], &[0, 2, 2, 3], vec![2, 2]).unwrap();
            weighted_loss(tape, y, 12)
        });
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&[4, 4], &mut rng);
            let b = rand_tensor(&[4, 4], &mut rng);
            let mut tape = Tape::new();
            let av = tape.param(&a);
            let bv = tape.param(&b);
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            let mut out = tape.value(s).data().to_vec();
            out.extend_from_slice(tape.grad(av).unwrap());
            out
        };
        let x = run(123);
        let y = run(123);
        assert_eq!(x, y, "same seed and op sequence must be bit-identical");
    }
}
