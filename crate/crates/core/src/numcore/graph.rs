//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are stored in
//! evaluation order, so a reverse sweep visits them in a valid topological
//! order. Leaves created with [`Graph::param`] accumulate gradients; leaves
//! created with [`Graph::input`] are constants.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Value written into masked-out attention scores.
pub const MASK_VALUE: f64 = -1e9;

pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operand of [`Graph::masked_kld`] is the reference distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// `KL(p ‖ q)`.
    ReferenceFirst,
    /// `KL(q ‖ p)`.
    ReferenceSecond,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CausalMask(Var),
    Rope { x: Var, base: f64 },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Sum(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Kld { p: Var, q: Var, mask: Vec<bool>, count: usize, direction: KldDirection },
    L2 { a: Var, b: Var, mask: Vec<bool>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph; one backward pass at a time.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_mask(mask: &[bool], rows: usize, op: &'static str) -> Result<usize> {
    if mask.len() != rows {
        return Err(shape_err(op, &[rows], &[mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rope_angles(seq: usize, dh: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for t in 0..seq {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / dh as f64);
            let angle = t as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is either a shared 2-D matrix
    /// (`[k, n]`, or `[n, k]` when `trans_b`) or carries the same leading batch
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != bk {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        if sb.len() == 2 {
            let m = av.len() / k;
            T::gemm(m, k, n, av, k as isize, 1, bv, rsb, csb, T::zero(), &mut out);
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = vec![T::zero(); va.len()];
        for (row, o) in va.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = vec![T::zero(); va.len()];
        for (row, o) in va.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(row, o);
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// RMS normalization over the last dimension followed by a per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.cols();
        if vg.len() != d || vg.shape().len() != 1 {
            return Err(shape_err("rms_norm", vx.shape(), vg.shape()));
        }
        let eps = T::lit(RMS_EPS);
        let mut out = vec![T::zero(); vx.len()];
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for (row, o) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / T::lit(d as f64);
            let inv = T::one() / (ms + eps).sqrt();
            for ((o, &v), &g) in o.iter_mut().zip(row).zip(vg.data()) {
                *o = v * inv * g;
            }
            inv_rms.push(inv);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// Gathers rows of `table` (`[V, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(shape_err("embedding", vt.shape(), &[ids.len()]));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!(
                "embedding: token id {bad} out of range for vocabulary of {v}"
            )));
        }
        if ids.is_empty() {
            return Err(shape_err("embedding", vt.shape(), &[0]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Replaces entries above the diagonal of each trailing `[T, T]` block
    /// with a large negative constant.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(shape_err("causal_mask", s, s));
        }
        let t = s[s.len() - 1];
        let mut out = va.data().to_vec();
        let mask = T::lit(MASK_VALUE);
        for block in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut block[i * t + i + 1..(i + 1) * t] {
                    *v = mask;
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::CausalMask(a), ng))
    }

    /// Rotary position encoding on `[batch, T, dh]`, rotating the two halves
    /// of the head dimension by position-dependent angles.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(shape_err("rope", s, &[0, 0, 2]));
        }
        let (seq, dh) = (s[1], s[2]);
        let half = dh / 2;
        let (cos, sin) = rope_angles(seq, dh, base);
        let mut out = vec![T::zero(); vx.len()];
        for (src, dst) in vx.data().chunks(seq * dh).zip(out.chunks_mut(seq * dh)) {
            for t in 0..seq {
                let r = &src[t * dh..(t + 1) * dh];
                let o = &mut dst[t * dh..(t + 1) * dh];
                for i in 0..half {
                    let (c, sn) = (T::lit(cos[t * half + i]), T::lit(sin[t * half + i]));
                    let (x1, x2) = (r[i], r[i + half]);
                    o[i] = x1 * c - x2 * sn;
                    o[i + half] = x1 * sn + x2 * c;
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Rope { x, base }, ng))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
            return Err(shape_err("split_heads", s, &[batch * seq, heads]));
        }
        let dh = s[1] / heads;
        let d = s[1];
        let src = vx.data();
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let o = ((b * heads + h) * seq + t) * dh;
                    let i = (b * seq + t) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&src[i..i + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(shape_err("merge_heads", s, &[batch * heads, seq]));
        }
        let dh = s[2];
        let d = dh * heads;
        let src = vx.data();
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let i = ((b * heads + h) * seq + t) * dh;
                    let o = (b * seq + t) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&src[i..i + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            ng,
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = T::zero();
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(shape_err("sum", v.shape(), &[1]));
            }
            acc += v.item();
        }
        let ng = terms.iter().any(|&t| self.ng(t));
        Ok(self.push(Tensor::scalar(acc), Op::Sum(terms.to_vec()), ng))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, v) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(shape_err("masked_cross_entropy", vl.shape(), &[targets.len()]));
        }
        let count = check_mask(mask, rows, "masked_cross_entropy")?;
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(Error::Invalid(format!(
                "masked_cross_entropy: target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut total = T::zero();
        let mut buf = vec![T::zero(); v];
        for r in 0..rows {
            if mask[r] {
                log_softmax_into(vl.row(r), &mut buf);
                total -= buf[targets[r]];
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Mean over masked rows of `KL(reference ‖ other)` between the softmax
    /// distributions of two logit tensors.
    pub fn masked_kld(&mut self, p: Var, q: Var, mask: &[bool], direction: KldDirection) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() {
            return Err(shape_err("masked_kld", vp.shape(), vq.shape()));
        }
        let (rows, v) = (vp.rows(), vp.cols());
        let count = check_mask(mask, rows, "masked_kld")?;
        let (vr, vo) = match direction {
            KldDirection::ReferenceFirst => (vp, vq),
            KldDirection::ReferenceSecond => (vq, vp),
        };
        let mut lr = vec![T::zero(); v];
        let mut lo = vec![T::zero(); v];
        let mut total = T::zero();
        for r in 0..rows {
            if mask[r] {
                log_softmax_into(vr.row(r), &mut lr);
                log_softmax_into(vo.row(r), &mut lo);
                for (&a, &b) in lr.iter().zip(&lo) {
                    total += a.exp() * (a - b);
                }
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let ng = self.ng(p) || self.ng(q);
        Ok(self.push(
            value,
            Op::Kld {
                p,
                q,
                mask: mask.to_vec(),
                count,
                direction,
            },
            ng,
        ))
    }

    /// Mean over masked rows of the squared Euclidean distance.
    pub fn l2_feature_distance(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Config("L2 mode requires equal hidden width".into()));
        }
        if va.shape() != vb.shape() {
            return Err(shape_err("l2_feature_distance", va.shape(), vb.shape()));
        }
        let count = check_mask(mask, va.rows(), "l2_feature_distance")?;
        let mut total = T::zero();
        for r in 0..va.rows() {
            if mask[r] {
                for (&x, &y) in va.row(r).iter().zip(vb.row(r)) {
                    total += (x - y) * (x - y);
                }
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            value,
            Op::L2 {
                a,
                b,
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Reverse sweep from a scalar `loss`. Gradients are retained for leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = sa[sa.len() - 1];
                let n = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (m, batch) = if sb.len() == 2 {
                    (av.len() / k, 1)
                } else {
                    let m = sa[sa.len() - 2];
                    (m, av.len() / (m * k))
                };
                let shared_b = sb.len() == 2;
                if let Some(ga) = self.acc(grads, *a) {
                    let ga = ga.data_mut();
                    // dA = dC · Bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[boff..boff + k * n],
                            rsb,
                            csb,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let gb = gb.data_mut();
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                        let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ · A
                            T::gemm(n, m, k, g_blk, 1, n as isize, a_blk, k as isize, 1, T::one(), &mut gb[boff..boff + k * n]);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            T::gemm(k, m, n, a_blk, 1, k as isize, g_blk, n as isize, 1, T::one(), &mut gb[boff..boff + k * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &d), &y) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &d), &x) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &d) in ga.data_mut().iter_mut().zip(gd) {
                        *o += d * *c;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, yr), dr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                        let dot = yr.iter().zip(dr).fold(T::zero(), |s, (&y, &d)| s + y * d);
                        for ((o, &y), &d) in o.iter_mut().zip(yr).zip(dr) {
                            *o += y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, yr), dr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                        let s = dr.iter().fold(T::zero(), |s, &d| s + d);
                        for ((o, &y), &d) in o.iter_mut().zip(yr).zip(dr) {
                            *o += d - y.exp() * s;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let vx = self.value(*x);
                let vg = self.value(*gain).data();
                let d = vx.cols();
                if let Some(gg) = self.acc(grads, *gain) {
                    let gg = gg.data_mut();
                    for ((xr, dr), &inv) in vx.data().chunks(d).zip(gd.chunks(d)).zip(inv_rms) {
                        for ((o, &xv), &dv) in gg.iter_mut().zip(xr).zip(dr) {
                            *o += dv * xv * inv;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::lit(d as f64);
                    for (((o, xr), dr), &inv) in gx.data_mut().chunks_mut(d).zip(vx.data().chunks(d)).zip(gd.chunks(d)).zip(inv_rms) {
                        // dxhat = dy ⊙ g ; dx = inv · (dxhat − xhat · mean(dxhat ⊙ xhat))
                        let mut dot = T::zero();
                        for ((&xv, &dv), &gv) in xr.iter().zip(dr).zip(vg) {
                            dot += dv * gv * xv * inv;
                        }
                        let mean = dot / dn;
                        for (((o, &xv), &dv), &gv) in o.iter_mut().zip(xr).zip(dr).zip(vg) {
                            *o += inv * (dv * gv - xv * inv * mean);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &d) in ga.data_mut().iter_mut().zip(va).zip(gd) {
                        let s = sigmoid(x);
                        *o += d * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = gt.cols();
                    let gt = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                let t = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, dblk) in ga.data_mut().chunks_mut(t * t).zip(gd.chunks(t * t)) {
                        for r in 0..t {
                            for c in 0..=r {
                                o[r * t + c] += dblk[r * t + c];
                            }
                        }
                    }
                }
            }
            Op::Rope { x, base } => {
                let s = node.value.shape();
                let (seq, dh) = (s[1], s[2]);
                let half = dh / 2;
                let (cos, sin) = rope_angles(seq, dh, *base);
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, dblk) in gx.data_mut().chunks_mut(seq * dh).zip(gd.chunks(seq * dh)) {
                        for t in 0..seq {
                            let dr = &dblk[t * dh..(t + 1) * dh];
                            let o = &mut o[t * dh..(t + 1) * dh];
                            for i in 0..half {
                                let (c, sn) = (T::lit(cos[t * half + i]), T::lit(sin[t * half + i]));
                                let (d1, d2) = (dr[i], dr[i + half]);
                                o[i] += d1 * c + d2 * sn;
                                o[i + half] += d2 * c - d1 * sn;
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let d = self.value(*x).cols();
                let dh = d / heads;
                if let Some(gx) = self.acc(grads, *x) {
                    let gx = gx.data_mut();
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let o = ((b * heads + h) * seq + t) * dh;
                                let i = (b * seq + t) * d + h * dh;
                                for e in 0..dh {
                                    gx[i + e] += gd[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = self.value(*x).cols();
                let d = dh * heads;
                if let Some(gx) = self.acc(grads, *x) {
                    let gx = gx.data_mut();
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let i = ((b * heads + h) * seq + t) * dh;
                                let o = (b * seq + t) * d + h * dh;
                                for e in 0..dh {
                                    gx[i + e] += gd[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(terms) => {
                for &t in terms {
                    if let Some(gt) = self.acc(grads, t) {
                        gt.data_mut()[0] += gd[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let vl = self.value(*logits);
                let v = vl.cols();
                let scale = gd[0] / T::lit(*count as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    let gl = gl.data_mut();
                    let mut buf = vec![T::zero(); v];
                    for r in 0..vl.rows() {
                        if !mask[r] {
                            continue;
                        }
                        softmax_into(vl.row(r), &mut buf);
                        buf[targets[r]] -= T::one();
                        for (o, &b) in gl[r * v..(r + 1) * v].iter_mut().zip(&buf) {
                            *o += b * scale;
                        }
                    }
                }
            }
            Op::Kld { p, q, mask, count, direction } => {
                let (reference, other) = match direction {
                    KldDirection::ReferenceFirst => (*p, *q),
                    KldDirection::ReferenceSecond => (*q, *p),
                };
                let vr = self.value(reference);
                let vo = self.value(other);
                let v = vr.cols();
                let scale = gd[0] / T::lit(*count as f64);
                let mut lr = vec![T::zero(); v];
                let mut lo = vec![T::zero(); v];
                let want_r = self.ng(reference);
                let want_o = self.ng(other);
                for r in 0..vr.rows() {
                    if !mask[r] {
                        continue;
                    }
                    log_softmax_into(vr.row(r), &mut lr);
                    log_softmax_into(vo.row(r), &mut lo);
                    if want_o {
                        // ∂KL/∂other = softmax(other) − softmax(reference)
                        let go = self.acc(grads, other).expect("needs grad").data_mut();
                        for ((o, &a), &b) in go[r * v..(r + 1) * v].iter_mut().zip(&lr).zip(&lo) {
                            *o += (b.exp() - a.exp()) * scale;
                        }
                    }
                    if want_r {
                        // ∂KL/∂reference_i = r_i · (log r_i − log o_i − KL_row)
                        let kl = lr.iter().zip(&lo).fold(T::zero(), |s, (&a, &b)| s + a.exp() * (a - b));
                        let gr = self.acc(grads, reference).expect("needs grad").data_mut();
                        for ((o, &a), &b) in gr[r * v..(r + 1) * v].iter_mut().zip(&lr).zip(&lo) {
                            *o += a.exp() * (a - b - kl) * scale;
                        }
                    }
                }
            }
            Op::L2 { a, b, mask, count } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let scale = T::lit(2.0) * gd[0] / T::lit(*count as f64);
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(gv) = self.acc(grads, v) {
                        let gv = gv.data_mut();
                        for r in 0..va.rows() {
                            if !mask[r] {
                                continue;
                            }
                            for c in 0..d {
                                let i = r * d + c;
                                gv[i] += sign * scale * (va.data()[i] - vb.data()[i]);
                            }
                        }
                    }
                }
            }
        }
    }
}
