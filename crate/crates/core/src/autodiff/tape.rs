use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    Sum(Var),
    Dot(Var, Var),
    Reshape(Var),
    Row { x: Var, row: usize },
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    StackRows { rows: Vec<Option<Var>>, width: usize },
    ConcatLast(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize>, mask: Vec<bool> },
    MaskRows { x: Var, mask: Vec<bool> },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    Conv2dSame { input: Var, kernel: Var, bias: Var },
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    MatchTensor { vq: Var, va: Var },
    LogisticLoss { probs: Var, labels: Vec<f64> },
    LogisticLossLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Leaves registered with [`Tape::param`] borrow their tensor, so binding a
/// large embedding table costs nothing per step.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradient of a scalar loss with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient of `var` as a tensor, zero-filled for disconnected nodes.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::with_shape(shape, g.clone()),
            None => Tensor::with_shape(shape.clone(), vec![0.0; shape.iter().product()]),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowing `value`.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning `value`.
    pub fn param_owned(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{what}: operand shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::with_shape(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::with_shape(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = self.elementwise2(a, b, |p, q| p + q);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let out = self.elementwise2(a, b, |p, q| p - q);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = self.elementwise2(a, b, |p, q| p * q);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |v| c * v);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `[n,k] x [k,m] -> [n,m]`; a 1-D left operand `[k]` yields `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(b));
        let (n, k, vector_lhs) = match x.shape() {
            [k] => (1, *k, true),
            [n, k] => (*n, *k, false),
            s => return Err(Error::Shape(format!("matmul: lhs must be 1-D or 2-D, got {s:?}"))),
        };
        let m = match w.shape() {
            [kk, m] if *kk == k => *m,
            s => return Err(Error::Shape(format!("matmul: lhs {:?} incompatible with rhs {s:?}", x.shape()))),
        };
        let mut out = vec![0.0; n * m];
        let (xd, wd) = (x.data(), w.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let xv = xd[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[p * m..(p + 1) * m];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let shape = if vector_lhs { vec![m] } else { vec![n, m] };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::with_shape(shape, out), Op::MatMul { a, b, n, k, m }, ng))
    }

    /// Adds a vector to every slice along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let m = last_dim(x);
        if b.len() != m {
            return Err(Error::Shape(format!("add_bias: bias length {} vs last axis {m}", b.len())));
        }
        let bd = b.data();
        let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % m]).collect();
        let out = Tensor::with_shape(x.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, math::sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, math::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, math::log_sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::LogSigmoid(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "dot")?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| p * q).sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", x.shape())));
        }
        let out = Tensor::with_shape(shape.to_vec(), x.data().to_vec());
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Row `row` of a 2-D tensor as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("row: expected 2-D, got {s:?}"))),
        };
        if row >= rows {
            return Err(Error::Shape(format!("row {row} out of {rows}")));
        }
        let out = Tensor::vector(t.data()[row * cols..(row + 1) * cols].to_vec());
        let ng = self.needs(x);
        Ok(self.push(out, Op::Row { x, row }, ng))
    }

    /// Elements `start..start+len` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || start + len > t.len() || len == 0 {
            return Err(Error::Shape(format!("slice {start}+{len} of {:?}", t.shape())));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// Concatenates tensors as one flat vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    /// Stacks vectors of length `width` into a `[rows, width]` matrix; `None`
    /// rows are zero.
    pub fn stack_rows(&mut self, rows: &[Option<Var>], width: usize) -> Result<Var> {
        if rows.is_empty() || width == 0 {
            return Err(Error::Shape("stack_rows: empty".into()));
        }
        let mut data = vec![0.0; rows.len() * width];
        for (r, row) in rows.iter().enumerate() {
            if let Some(v) = row {
                let t = self.value(*v);
                if t.len() != width {
                    return Err(Error::Shape(format!("stack_rows: row of {} vs {width}", t.len())));
                }
                data[r * width..(r + 1) * width].copy_from_slice(t.data());
            }
        }
        let ng = rows.iter().flatten().any(|&v| self.needs(v));
        let out = Tensor::with_shape(vec![rows.len(), width], data);
        Ok(self.push(out, Op::StackRows { rows: rows.to_vec(), width }, ng))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Shape("concat_last: empty".into()))?);
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let outer: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!("concat_last: {s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; outer * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for o in 0..outer {
                data[o * total + off..o * total + off + w].copy_from_slice(&src[o * w..(o + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::with_shape(shape, data), Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Looks up rows of a `[V, d]` table; rows where `mask` is false are zero.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = match t.shape() {
            [v, d] => (*v, *d),
            s => return Err(Error::Shape(format!("gather_rows: table must be 2-D, got {s:?}"))),
        };
        if ids.len() != mask.len() || ids.is_empty() {
            return Err(Error::Shape("gather_rows: ids/mask length mismatch".into()));
        }
        let mut data = vec![0.0; ids.len() * d];
        for (r, (&id, &m)) in ids.iter().zip(mask).enumerate() {
            if id >= vocab {
                return Err(Error::IdOutOfRange { id, size: vocab });
            }
            if m {
                data[r * d..(r + 1) * d].copy_from_slice(t.row(id));
            }
        }
        let ng = self.needs(table);
        let out = Tensor::with_shape(vec![ids.len(), d], data);
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec(), mask: mask.to_vec() }, ng))
    }

    /// Zeroes the rows of a 2-D tensor where `mask` is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if t.shape().len() != 2 || rows != mask.len() {
            return Err(Error::Shape(format!("mask_rows: {:?} vs mask {}", t.shape(), mask.len())));
        }
        let cols = t.shape()[1];
        let mut data = t.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                data[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        let out = Tensor::with_shape(t.shape().to_vec(), data);
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskRows { x, mask: mask.to_vec() }, ng))
    }

    /// Softmax over the positions where `mask` is true; exactly zero elsewhere.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != mask.len() {
            return Err(Error::Shape(format!("masked_softmax: {} scores vs {} mask entries", t.len(), mask.len())));
        }
        let probs = softmax_masked(t.data(), mask)?;
        let ng = self.needs(x);
        Ok(self.push(Tensor::vector(probs), Op::MaskedSoftmax { x, mask: mask.to_vec() }, ng))
    }

    /// Zero-padded cross-correlation that preserves the spatial extent.
    ///
    /// `input` is `[H, W, Cin]`, `kernel` is `[kh, kw, Cin, Cout]`, `bias` is
    /// `[Cout]`. Padding before is `(k-1)/2` on each axis, the remainder goes after.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let (h, w, cin) = match x.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Shape(format!("conv2d: input must be HxWxC, got {s:?}"))),
        };
        let (kh, kw, kc, cout) = match k.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::Shape(format!("conv2d: kernel must be 4-D, got {s:?}"))),
        };
        if kc != cin {
            return Err(Error::Shape(format!("conv2d: input has {cin} channels, kernel expects {kc}")));
        }
        if b.len() != cout {
            return Err(Error::Shape(format!("conv2d: bias {} vs {cout} filters", b.len())));
        }
        let out = conv2d_forward(x.data(), k.data(), b.data(), h, w, cin, kh, kw, cout);
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(Tensor::with_shape(vec![h, w, cout], out), Op::Conv2dSame { input, kernel, bias }, ng))
    }

    /// Per-channel maximum over all spatial positions of `[H, W, C]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let c = match x.shape() {
            [_, _, c] => *c,
            s => return Err(Error::Shape(format!("max_pool: expected HxWxC, got {s:?}"))),
        };
        let positions = x.len() / c;
        let d = x.data();
        let mut best = d[..c].to_vec();
        let mut argmax: Vec<usize> = (0..c).collect();
        for p in 1..positions {
            for ch in 0..c {
                let v = d[p * c + ch];
                if v > best[ch] {
                    best[ch] = v;
                    argmax[ch] = p * c + ch;
                }
            }
        }
        let ng = self.needs(input);
        Ok(self.push(Tensor::vector(best), Op::GlobalMaxPool { input, argmax }, ng))
    }

    /// `[lq, d] x [la, d] -> [lq, la, d+1]`: elementwise products of every
    /// query/ad row pair, plus a final constant channel from `exact`
    /// (row-major `lq x la`).
    pub fn match_tensor(&mut self, vq: Var, va: Var, exact: &[bool]) -> Result<Var> {
        let (q, a) = (self.value(vq), self.value(va));
        let (lq, d, la) = match (q.shape(), a.shape()) {
            ([lq, d], [la, d2]) if d == d2 => (*lq, *d, *la),
            (s1, s2) => return Err(Error::Shape(format!("match_tensor: {s1:?} vs {s2:?}"))),
        };
        if exact.len() != lq * la {
            return Err(Error::Shape(format!("match_tensor: exact-match has {} cells, expected {}", exact.len(), lq * la)));
        }
        let depth = d + 1;
        let mut out = vec![0.0; lq * la * depth];
        for i in 0..lq {
            let qi = q.row(i);
            for j in 0..la {
                let aj = a.row(j);
                let cell = &mut out[(i * la + j) * depth..(i * la + j + 1) * depth];
                for c in 0..d {
                    cell[c] = qi[c] * aj[c];
                }
                cell[d] = if exact[i * la + j] { 1.0 } else { 0.0 };
            }
        }
        let ng = self.needs(vq) || self.needs(va);
        Ok(self.push(Tensor::with_shape(vec![lq, la, depth], out), Op::MatchTensor { vq, va }, ng))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn logistic_loss(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidInput(format!("logistic loss over {} predictions and {} labels", p.len(), labels.len())));
        }
        let value = crate::losses::logistic_loss(p.data(), labels)?;
        let ng = self.needs(probs);
        Ok(self.push(Tensor::scalar(value), Op::LogisticLoss { probs, labels: labels.to_vec() }, ng))
    }

    /// Mean binary cross-entropy evaluated from logits,
    /// `-(1/N) Σ [y ln σ(x) + (1-y) ln σ(-x)]`; equal to [`Tape::logistic_loss`]
    /// on `σ(x)` wherever the clamp is inactive, and accurate for large `|x|`.
    pub fn logistic_loss_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidInput(format!("logistic loss over {} logits and {} labels", x.len(), labels.len())));
        }
        let total: f64 = x.data().iter().zip(labels).map(|(&v, &y)| y * math::log_sigmoid(v) + (1.0 - y) * math::log_sigmoid(-v)).sum();
        let value = -total / labels.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(value), Op::LogisticLossLogits { logits, labels: labels.to_vec() }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = val(*a).data();
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
            }
            Op::MatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], n * k);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let mut s = 0.0;
                            for j in 0..m {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * m);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * m..(p + 1) * m];
                            for j in 0..m {
                                gbrow[j] += x * grow[j];
                            }
                        }
                    }
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if needs(*b) {
                    let m = val(*b).len();
                    let gb = accumulate(&mut grads[b.0], m);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % m] += y;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * math::sigmoid(-x[i]);
                }
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                let ga = accumulate(&mut grads[a.0], len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    ga.iter_mut().zip(bv).for_each(|(x, &y)| *x += g[0] * y);
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    gb.iter_mut().zip(av).for_each(|(x, &y)| *x += g[0] * y);
                }
            }
            Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            Op::Row { x, row } => {
                let len = val(*x).len();
                let gx = accumulate(&mut grads[x.0], len);
                let off = row * g.len();
                gx[off..off + g.len()].iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }
            Op::Slice { x, start } => {
                let len = val(*x).len();
                let gx = accumulate(&mut grads[x.0], len);
                gx[*start..*start + g.len()].iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], len);
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::StackRows { rows, width } => {
                for (r, row) in rows.iter().enumerate() {
                    if let Some(v) = row {
                        if needs(*v) {
                            let gv = accumulate(&mut grads[v.0], *width);
                            let src = &g[r * width..(r + 1) * width];
                            gv.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = last_dim(out);
                let outer = out.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = last_dim(val(p));
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], outer * w);
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + w];
                            gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, ids, mask } => {
                let t = val(*table);
                let d = t.shape()[1];
                let gt = accumulate(&mut grads[table.0], t.len());
                for (r, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                    if m {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MaskRows { x, mask } => {
                let cols = out.shape()[1];
                let gx = accumulate(&mut grads[x.0], g.len());
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for c in r * cols..(r + 1) * cols {
                            gx[c] += g[c];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = out.data();
                let inner: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                let gx = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if mask[i] {
                        gx[i] += y[i] * (g[i] - inner);
                    }
                }
            }
            Op::Conv2dSame { input, kernel, bias } => {
                let (x, k) = (val(*input), val(*kernel));
                let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
                if needs(*bias) {
                    let gb = accumulate(&mut grads[bias.0], cout);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % cout] += y;
                    }
                }
                if needs(*kernel) {
                    let gk = accumulate(&mut grads[kernel.0], k.len());
                    conv2d_grad_kernel(x.data(), g, gk, h, w, cin, kh, kw, cout);
                }
                if needs(*input) {
                    let gx = accumulate(&mut grads[input.0], x.len());
                    conv2d_grad_input(k.data(), g, gx, h, w, cin, kh, kw, cout);
                }
            }
            Op::GlobalMaxPool { input, argmax } => {
                let len = val(*input).len();
                let gx = accumulate(&mut grads[input.0], len);
                for (c, &idx) in argmax.iter().enumerate() {
                    gx[idx] += g[c];
                }
            }
            Op::MatchTensor { vq, va } => {
                let (q, a) = (val(*vq), val(*va));
                let (lq, d) = (q.shape()[0], q.shape()[1]);
                let la = a.shape()[0];
                let depth = d + 1;
                if needs(*vq) {
                    let gq = accumulate(&mut grads[vq.0], lq * d);
                    for i in 0..lq {
                        for j in 0..la {
                            let aj = a.row(j);
                            let cell = &g[(i * la + j) * depth..];
                            for c in 0..d {
                                gq[i * d + c] += cell[c] * aj[c];
                            }
                        }
                    }
                }
                if needs(*va) {
                    let ga = accumulate(&mut grads[va.0], la * d);
                    for i in 0..lq {
                        let qi = q.row(i);
                        for j in 0..la {
                            let cell = &g[(i * la + j) * depth..];
                            for c in 0..d {
                                ga[j * d + c] += cell[c] * qi[c];
                            }
                        }
                    }
                }
            }
            Op::LogisticLoss { probs, labels } => {
                let p = val(*probs).data();
                let n = labels.len() as f64;
                let gp = accumulate(&mut grads[probs.0], p.len());
                for i in 0..p.len() {
                    let pi = p[i];
                    if pi <= crate::losses::PROB_CLAMP || pi >= 1.0 - crate::losses::PROB_CLAMP {
                        continue;
                    }
                    let y = labels[i];
                    gp[i] += -g[0] / n * (y / pi - (1.0 - y) / (1.0 - pi));
                }
            }
            Op::LogisticLossLogits { logits, labels } => {
                let x = val(*logits).data();
                let n = labels.len() as f64;
                let gx = accumulate(&mut grads[logits.0], x.len());
                for i in 0..x.len() {
                    gx[i] += g[0] / n * (math::sigmoid(x[i]) - labels[i]);
                }
            }
        }
    }
}

/// Softmax restricted to positions where `mask` is true.
pub(crate) fn softmax_masked(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionSupport);
    }
    let mut out: Vec<f64> = scores.iter().zip(mask).map(|(&s, &m)| if m { math::exp(s - max) } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &[f64], k: &[f64], b: &[f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize) -> Vec<f64> {
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(b);
            for ky in 0..kh {
                let iy = y + ky;
                if iy < pt || iy - pt >= h {
                    continue;
                }
                let iy = iy - pt;
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pl || ix - pl >= w {
                        continue;
                    }
                    let ix = ix - pl;
                    let inp = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (oo, &kv) in o.iter_mut().zip(krow) {
                            *oo += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_kernel(x: &[f64], g: &[f64], gk: &mut [f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize) {
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..kh {
                let iy = y + ky;
                if iy < pt || iy - pt >= h {
                    continue;
                }
                let iy = iy - pt;
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pl || ix - pl >= w {
                        continue;
                    }
                    let ix = ix - pl;
                    let inp = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (kk, &gv) in krow.iter_mut().zip(go) {
                            *kk += v * gv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input(k: &[f64], g: &[f64], gx: &mut [f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize) {
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..kh {
                let iy = y + ky;
                if iy < pt || iy - pt >= h {
                    continue;
                }
                let iy = iy - pt;
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pl || ix - pl >= w {
                        continue;
                    }
                    let ix = ix - pl;
                    let gin = &mut gx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, gi) in gin.iter_mut().enumerate() {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut s = 0.0;
                        for (&kv, &gv) in krow.iter().zip(go) {
                            s += kv * gv;
                        }
                        *gi += s;
                    }
                }
            }
        }
    }
}
