//! Define-by-run tape: records every operation of a forward pass and
//! replays it in reverse for gradients.
//!
//! A tape and its vars are confined to one logical thread. Node ids are
//! append-only, so reverse iteration is a valid topological order and each
//! node's gradient is the sum of contributions from all of its consumers.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

enum Op<F: Element> {
    Leaf,
    /// Binary elementwise ops; rhs may broadcast as a trailing suffix of lhs.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    /// ln(max(x, eps)): the epsilon rule for probability logs.
    LogClamped(usize, F),
    Sqrt(usize),
    Relu(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, b: usize, dims: ConvDims, cols: Vec<Vec<F>> },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    AvgPool2d { x: usize, k: usize, stride: usize },
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    MaxAll { a: usize, argmax: usize },
    SumAxis0(usize),
    MeanAxis0(usize),
    /// Mean over batch and spatial axes of (N,C,H,W), one value per channel.
    MeanPerChannel(usize),
    /// (N,C,H,W) combined with a per-channel vector (C).
    AddChannel { x: usize, c: usize },
    MulChannel { x: usize, c: usize },
    /// Row-wise stable log-softmax of a (N,C) matrix.
    LogSoftmax(usize),
}

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

struct Node<F: Element> {
    value: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

/// Topologically ordered record of one forward pass.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, needs_grad: bool, op: Op<F>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, shape, grad: None, needs_grad, op });
        Var { id }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Insert a detached tensor as a leaf.
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.id].value.len(), 1);
        self.nodes[v.id].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape consistent")
    }

    /// Gradient of a node after [`Tape::backward`]; `None` before backward
    /// or for nodes outside the differentiated subgraph.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.id].grad.as_deref()
    }

    // ── shape plumbing ──────────────────────────────────────────────

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // rhs may broadcast over leading dims when it is a trailing suffix
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok(sa.to_vec());
        }
        Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
    }

    fn binary<G>(&mut self, op: &'static str, a: Var, b: Var, f: G, make: fn(usize, usize) -> Op<F>) -> Result<Var>
    where
        G: Fn(F, F) -> F,
    {
        let shape = self.binary_shapes(op, a, b)?;
        let bn = self.nodes[b.id].value.len();
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let out: Vec<F> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bn])).collect();
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out, shape, ng, make(a.id, b.id)))
    }

    // ── elementwise ops ─────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        self.push(out, shape, ng, Op::Scale(a.id, c))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        self.push(out, shape, ng, Op::AddConst(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        self.push(out, shape, ng, Op::Exp(a.id))
    }

    /// Natural log; non-positive operands are rejected. Probability logs go
    /// through [`Tape::log_clamped`] instead.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.id].value.iter().find(|v| **v <= F::zero()) {
            return Err(Error::InvalidArgument(format!(
                "log of non-positive value {bad}"
            )));
        }
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        Ok(self.push(out, shape, ng, Op::Log(a.id)))
    }

    /// ln(max(x, eps)); gradient is 1/x above eps and 0 below.
    pub fn log_clamped(&mut self, a: Var, eps: F) -> Var {
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x.max(eps).ln()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        self.push(out, shape, ng, Op::LogClamped(a.id, eps))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.id].value.iter().find(|v| **v < F::zero()) {
            return Err(Error::InvalidArgument(format!("sqrt of negative value {bad}")));
        }
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        Ok(self.push(out, shape, ng, Op::Sqrt(a.id)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.id].value.iter().map(|&x| x.max(F::zero())).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a.id);
        self.push(out, shape, ng, Op::Relu(a.id))
    }

    // ── matmul / conv / pooling ─────────────────────────────────────

    /// (m,k) @ (k,n) -> (m,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n);
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out, vec![m, n], ng, Op::MatMul { a: a.id, b: b.id, m, k, n }))
    }

    /// 2-D convolution of (N,Cin,H,W) with (Cout,Cin,KH,KW) plus bias (Cout),
    /// lowered per image to a matrix product over im2col patches.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let sb = self.shape(b).to_vec();
        if sb != vec![sw[0]] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: sw, rhs: sb });
        }
        let dims = ConvDims {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad,
            stride,
            h_out: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            w_out: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let patch = dims.c_in * dims.kh * dims.kw;
        let positions = dims.h_out * dims.w_out;
        let image = dims.c_in * dims.h * dims.w;
        let out_image = dims.c_out * positions;
        let mut out = vec![F::zero(); dims.batch * out_image];
        let mut cols = Vec::with_capacity(dims.batch);
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let bv = &self.nodes[b.id].value;
        for i in 0..dims.batch {
            let col = im2col(&xv[i * image..(i + 1) * image], &dims);
            let o = &mut out[i * out_image..(i + 1) * out_image];
            // o = W_mat (Cout x patch) @ col (patch x positions)
            matmul_into(wv, &col, o, dims.c_out, patch, positions);
            for co in 0..dims.c_out {
                let bias = bv[co];
                for v in &mut o[co * positions..(co + 1) * positions] {
                    *v += bias;
                }
            }
            cols.push(col);
        }
        let ng = self.needs(x.id) || self.needs(w.id) || self.needs(b.id);
        Ok(self.push(
            out,
            vec![dims.batch, dims.c_out, dims.h_out, dims.w_out],
            ng,
            Op::Conv2d { x: x.id, w: w.id, b: b.id, dims, cols },
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch { op: "max_pool2d", lhs: sx, rhs: vec![] });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let mut out = vec![F::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        let xv = &self.nodes[x.id].value;
        let mut oi = 0;
        for img in 0..n * c {
            let base = img * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * stride * w + j * stride;
                    let mut bestv = xv[best];
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + (j * stride + dj);
                            if xv[idx] > bestv {
                                bestv = xv[idx];
                                best = idx;
                            }
                        }
                    }
                    out[oi] = bestv;
                    argmax[oi] = best;
                    oi += 1;
                }
            }
        }
        let ng = self.needs(x.id);
        Ok(self.push(out, vec![n, c, ho, wo], ng, Op::MaxPool2d { x: x.id, argmax }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch { op: "avg_pool2d", lhs: sx, rhs: vec![] });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let inv = F::one() / F::from_usize(k * k);
        let mut out = vec![F::zero(); n * c * ho * wo];
        let xv = &self.nodes[x.id].value;
        let mut oi = 0;
        for img in 0..n * c {
            let base = img * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = F::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            s += xv[base + (i * stride + di) * w + (j * stride + dj)];
                        }
                    }
                    out[oi] = s * inv;
                    oi += 1;
                }
            }
        }
        let ng = self.needs(x.id);
        Ok(self.push(out, vec![n, c, ho, wo], ng, Op::AvgPool2d { x: x.id, k, stride }))
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.id].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape,
            });
        }
        let out = self.nodes[a.id].value.clone();
        let ng = self.needs(a.id);
        Ok(self.push(out, new_shape, ng, Op::Reshape(a.id)))
    }

    /// Flatten (N, ...) to (N, rest).
    pub fn flatten_batch(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, vec![n, rest])
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().fold(F::zero(), |acc, &v| acc + v);
        let ng = self.needs(a.id);
        self.push(vec![s], vec![1], ng, Op::SumAll(a.id))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.nodes[a.id].value.len());
        let s = self.nodes[a.id].value.iter().fold(F::zero(), |acc, &v| acc + v);
        let ng = self.needs(a.id);
        self.push(vec![s / n], vec![1], ng, Op::MeanAll(a.id))
    }

    /// Max over all elements; the gradient routes to the first maximizer.
    pub fn max_all(&mut self, a: Var) -> Var {
        let vals = &self.nodes[a.id].value;
        let am = super::argmax(vals);
        let ng = self.needs(a.id);
        let v = vals[am];
        self.push(vec![v], vec![1], ng, Op::MaxAll { a: a.id, argmax: am })
    }

    /// Column sums of an (N,C) matrix -> (C).
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "sum_axis0", lhs: s, rhs: vec![] });
        }
        let (n, c) = (s[0], s[1]);
        let mut out = vec![F::zero(); c];
        for row in self.nodes[a.id].value.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let _ = n;
        let ng = self.needs(a.id);
        Ok(self.push(out, vec![c], ng, Op::SumAxis0(a.id)))
    }

    /// Column means of an (N,C) matrix -> (C).
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "mean_axis0", lhs: s, rhs: vec![] });
        }
        let (n, c) = (s[0], s[1]);
        let inv = F::one() / F::from_usize(n);
        let mut out = vec![F::zero(); c];
        for row in self.nodes[a.id].value.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.needs(a.id);
        Ok(self.push(out, vec![c], ng, Op::MeanAxis0(a.id)))
    }

    /// Per-channel mean of (N,C,H,W) over batch and spatial axes -> (C).
    pub fn mean_per_channel(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch { op: "mean_per_channel", lhs: s, rhs: vec![] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let inv = F::one() / F::from_usize(n * plane);
        let mut out = vec![F::zero(); c];
        let v = &self.nodes[a.id].value;
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let mut s0 = F::zero();
                for &x in &v[base..base + plane] {
                    s0 += x;
                }
                out[ch] += s0;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.needs(a.id);
        Ok(self.push(out, vec![c], ng, Op::MeanPerChannel(a.id)))
    }

    fn channel_shapes(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x).to_vec();
        let sc = self.shape(c).to_vec();
        if sx.len() != 4 || sc.len() != 1 || sc[0] != sx[1] {
            return Err(Error::ShapeMismatch { op, lhs: sx, rhs: sc });
        }
        Ok((sx[0], sx[1], sx[2] * sx[3]))
    }

    /// (N,C,H,W) + per-channel (C).
    pub fn add_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, ch, plane) = self.channel_shapes("add_channel", x, c)?;
        let xv = &self.nodes[x.id].value;
        let cv = &self.nodes[c.id].value;
        let mut out = Vec::with_capacity(xv.len());
        for img in 0..n {
            for k in 0..ch {
                let base = (img * ch + k) * plane;
                let add = cv[k];
                out.extend(xv[base..base + plane].iter().map(|&v| v + add));
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.id) || self.needs(c.id);
        Ok(self.push(out, shape, ng, Op::AddChannel { x: x.id, c: c.id }))
    }

    /// (N,C,H,W) * per-channel (C).
    pub fn mul_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, ch, plane) = self.channel_shapes("mul_channel", x, c)?;
        let xv = &self.nodes[x.id].value;
        let cv = &self.nodes[c.id].value;
        let mut out = Vec::with_capacity(xv.len());
        for img in 0..n {
            for k in 0..ch {
                let base = (img * ch + k) * plane;
                let f = cv[k];
                out.extend(xv[base..base + plane].iter().map(|&v| v * f));
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x.id) || self.needs(c.id);
        Ok(self.push(out, shape, ng, Op::MulChannel { x: x.id, c: c.id }))
    }

    /// Row-wise log-softmax of (N,C), stabilized by max subtraction.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "log_softmax", lhs: s, rhs: vec![] });
        }
        let c = s[1];
        let mut out = Vec::with_capacity(self.nodes[z.id].value.len());
        for row in self.nodes[z.id].value.chunks_exact(c) {
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(F::zero(), |acc, &v| acc + (v - m).exp()).ln() + m;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let ng = self.needs(z.id);
        Ok(self.push(out, s, ng, Op::LogSoftmax(z.id)))
    }

    /// Row-wise softmax, computed as exp(log_softmax) for stability.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let ls = self.log_softmax(z)?;
        Ok(self.exp(ls))
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: usize, contrib: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let g = self.nodes[id]
            .grad
            .get_or_insert_with(|| vec![F::zero(); contrib.len()]);
        for (a, &b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    /// Accumulate `contrib` (shape of lhs) into a possibly suffix-broadcast
    /// rhs operand by folding the leading dims.
    fn accumulate_folded(&mut self, id: usize, contrib: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let n = self.nodes[id].value.len();
        if n == contrib.len() {
            self.accumulate(id, contrib);
            return;
        }
        let mut folded = vec![F::zero(); n];
        for (i, &v) in contrib.iter().enumerate() {
            folded[i % n] += v;
        }
        self.accumulate(id, &folded);
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// grad-requiring node reachable from `loss`; other leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "second backward on the same tape; rebuild the graph first".into(),
            ));
        }
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.id].grad = Some(vec![F::one()]);

        for id in (0..=loss.id).rev() {
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            // Ownership dance: op metadata is swapped out so `self` stays
            // borrowable for accumulation, then swapped back in.
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.dispatch_backward(id, &op, &grad);
            self.nodes[id].op = op;
            self.nodes[id].grad = Some(grad);
        }

        // Unreached grad-requiring leaves get explicit zero gradients.
        for node in &mut self.nodes {
            if node.needs_grad && node.grad.is_none() {
                if let Op::Leaf = node.op {
                    node.grad = Some(vec![F::zero(); node.value.len()]);
                }
            }
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, out_id: usize, op: &Op<F>, g: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate_folded(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.accumulate_folded(b, &neg);
            }
            Op::Mul(a, b) => {
                let bn = self.nodes[b].value.len();
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * self.nodes[b].value[i % bn])
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&v, &x)| v * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate_folded(b, &db);
            }
            Op::Div(a, b) => {
                let bn = self.nodes[b].value.len();
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v / self.nodes[b].value[i % bn])
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let x = self.nodes[a].value[i];
                        let y = self.nodes[b].value[i % bn];
                        -v * x / (y * y)
                    })
                    .collect();
                self.accumulate(a, &da);
                self.accumulate_folded(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<F> = g.iter().map(|&v| v * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddConst(a) => {
                self.accumulate(a, g);
            }
            Op::Exp(a) => {
                // reuse the saved output: d exp = exp
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[out_id].value)
                    .map(|(&v, &e)| v * e)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Log(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&v, &x)| v / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::LogClamped(a, eps) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&v, &x)| if x > eps { v / x } else { F::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sqrt(a) => {
                let half = F::from_f64(0.5);
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[out_id].value)
                    .map(|(&v, &s)| {
                        if s > F::zero() {
                            v * half / s
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&v, &x)| if x > F::zero() { v } else { F::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.nodes[a].needs_grad {
                    // dA = g (m,n) @ B^T (n,k)
                    let bt = transpose(&self.nodes[b].value, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T (k,m) @ g (m,n)
                    let at = transpose(&self.nodes[a].value, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { x, w, b, ref dims, ref cols } => {
                self.conv2d_backward(x, w, b, dims, cols, g);
            }
            Op::MaxPool2d { x, ref argmax, .. } => {
                let mut dx = vec![F::zero(); self.nodes[x].value.len()];
                for (&src, &v) in argmax.iter().zip(g) {
                    dx[src] += v;
                }
                self.accumulate(x, &dx);
            }
            Op::AvgPool2d { x, k, stride } => {
                let sx = self.nodes[x].shape.clone();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let ho = (h - k) / stride + 1;
                let wo = (w - k) / stride + 1;
                let inv = F::one() / F::from_usize(k * k);
                let mut dx = vec![F::zero(); self.nodes[x].value.len()];
                let mut oi = 0;
                for img in 0..n * c {
                    let base = img * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = g[oi] * inv;
                            for di in 0..k {
                                for dj in 0..k {
                                    dx[base + (i * stride + di) * w + (j * stride + dj)] += gv;
                                }
                            }
                            oi += 1;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape(a) => {
                self.accumulate(a, g);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a].value.len()];
                self.accumulate(a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len();
                let da = vec![g[0] / F::from_usize(n); n];
                self.accumulate(a, &da);
            }
            Op::MaxAll { a, argmax } => {
                let mut da = vec![F::zero(); self.nodes[a].value.len()];
                da[argmax] = g[0];
                self.accumulate(a, &da);
            }
            Op::SumAxis0(a) => {
                let c = g.len();
                let n = self.nodes[a].value.len() / c;
                let da: Vec<F> = (0..n).flat_map(|_| g.iter().copied()).collect();
                self.accumulate(a, &da);
            }
            Op::MeanAxis0(a) => {
                let c = g.len();
                let n = self.nodes[a].value.len() / c;
                let inv = F::one() / F::from_usize(n);
                let da: Vec<F> = (0..n).flat_map(|_| g.iter().map(|&v| v * inv)).collect();
                self.accumulate(a, &da);
            }
            Op::MeanPerChannel(a) => {
                let sx = self.nodes[a].shape.clone();
                let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let inv = F::one() / F::from_usize(n * plane);
                let mut da = Vec::with_capacity(self.nodes[a].value.len());
                for _ in 0..n {
                    for ch in 0..c {
                        let v = g[ch] * inv;
                        da.extend(std::iter::repeat(v).take(plane));
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AddChannel { x, c } => {
                self.accumulate(x, g);
                if self.nodes[c].needs_grad {
                    let sx = self.nodes[x].shape.clone();
                    let (n, ch, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                    let mut dc = vec![F::zero(); ch];
                    for img in 0..n {
                        for k in 0..ch {
                            let base = (img * ch + k) * plane;
                            let mut s = F::zero();
                            for &v in &g[base..base + plane] {
                                s += v;
                            }
                            dc[k] += s;
                        }
                    }
                    self.accumulate(c, &dc);
                }
            }
            Op::MulChannel { x, c } => {
                let sx = self.nodes[x].shape.clone();
                let (n, ch, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                if self.nodes[x].needs_grad {
                    let cv = &self.nodes[c].value;
                    let mut dx = Vec::with_capacity(g.len());
                    for img in 0..n {
                        for k in 0..ch {
                            let base = (img * ch + k) * plane;
                            let f = cv[k];
                            dx.extend(g[base..base + plane].iter().map(|&v| v * f));
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.nodes[c].needs_grad {
                    let xv = &self.nodes[x].value;
                    let mut dc = vec![F::zero(); ch];
                    for img in 0..n {
                        for k in 0..ch {
                            let base = (img * ch + k) * plane;
                            let mut s = F::zero();
                            for (&v, &xx) in g[base..base + plane].iter().zip(&xv[base..base + plane]) {
                                s += v * xx;
                            }
                            dc[k] += s;
                        }
                    }
                    self.accumulate(c, &dc);
                }
            }
            Op::LogSoftmax(z) => {
                // d z = g - softmax(z) * rowsum(g); softmax = exp(saved output)
                let c = self.nodes[out_id].shape[1];
                let out = &self.nodes[out_id].value;
                let mut dz = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks_exact(c).zip(out.chunks_exact(c)) {
                    let rs = grow.iter().fold(F::zero(), |a, &b| a + b);
                    dz.extend(
                        grow.iter()
                            .zip(orow)
                            .map(|(&gv, &lv)| gv - lv.exp() * rs),
                    );
                }
                self.accumulate(z, &dz);
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        x: usize,
        w: usize,
        b: usize,
        dims: &ConvDims,
        cols: &[Vec<F>],
        g: &[F],
    ) {
        let patch = dims.c_in * dims.kh * dims.kw;
        let positions = dims.h_out * dims.w_out;
        let image = dims.c_in * dims.h * dims.w;
        let out_image = dims.c_out * positions;

        if self.nodes[w].needs_grad || self.nodes[b].needs_grad {
            let mut dw = vec![F::zero(); dims.c_out * patch];
            let mut db = vec![F::zero(); dims.c_out];
            for i in 0..dims.batch {
                let go = &g[i * out_image..(i + 1) * out_image];
                // dW += g_i (Cout x positions) @ cols_i^T (positions x patch)
                let colt = transpose(&cols[i], patch, positions);
                matmul_acc(go, &colt, &mut dw, dims.c_out, positions, patch);
                for co in 0..dims.c_out {
                    let mut s = F::zero();
                    for &v in &go[co * positions..(co + 1) * positions] {
                        s += v;
                    }
                    db[co] += s;
                }
            }
            self.accumulate(w, &dw);
            self.accumulate(b, &db);
        }

        if self.nodes[x].needs_grad {
            let wt = transpose(&self.nodes[w].value, dims.c_out, patch);
            let mut dx = vec![F::zero(); dims.batch * image];
            let mut dcol = vec![F::zero(); patch * positions];
            for i in 0..dims.batch {
                let go = &g[i * out_image..(i + 1) * out_image];
                for v in &mut dcol {
                    *v = F::zero();
                }
                // dcol = W^T (patch x Cout) @ g_i (Cout x positions)
                matmul_acc(&wt, go, &mut dcol, patch, dims.c_out, positions);
                col2im_acc(&dcol, &mut dx[i * image..(i + 1) * image], dims);
            }
            self.accumulate(x, &dx);
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// C = A (m,k) @ B (k,n); ikj loop order for contiguous inner updates.
fn matmul_raw<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

fn matmul_into<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for v in c.iter_mut() {
        *v = F::zero();
    }
    matmul_acc(a, b, c, m, k, n);
}

/// C += A @ B. Inner loop runs over contiguous rows of B and C so the
/// compiler can vectorize; accumulation order is fixed, independent of any
/// thread count, so results are bit-reproducible.
fn matmul_acc<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose<F: Element>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Patch matrix (Cin*KH*KW, Ho*Wo) of one image, zero padding outside.
fn im2col<F: Element>(img: &[F], d: &ConvDims) -> Vec<F> {
    let positions = d.h_out * d.w_out;
    let mut col = vec![F::zero(); d.c_in * d.kh * d.kw * positions];
    let mut r = 0;
    for ci in 0..d.c_in {
        let plane = &img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let dst = &mut col[r * positions..(r + 1) * positions];
                let mut p = 0;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        p += d.w_out;
                        continue;
                    }
                    let row = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.w as isize {
                            dst[p] = row[iw as usize];
                        }
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto one image.
fn col2im_acc<F: Element>(col: &[F], img: &mut [F], d: &ConvDims) {
    let positions = d.h_out * d.w_out;
    let mut r = 0;
    for ci in 0..d.c_in {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let src = &col[r * positions..(r + 1) * positions];
                let mut p = 0;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        p += d.w_out;
                        continue;
                    }
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.w as isize {
                            img[(ci * d.h + ih as usize) * d.w + iw as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&t64(vec![1], vec![0.0]));
        let y = t.exp(x);
        assert_eq!(t.value(y), &[1.0]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut t = Tape::<f64>::new();
        let eye = t.constant(&t64(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = vec![2., -1., 0.5, 3., 7., -2., 0., 4., 9.];
        let a = t.constant(&t64(vec![3, 3], a_data.clone()));
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(y), a_data.as_slice());
    }

    #[test]
    fn sum_reduce_forced_arithmetic() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&t64(vec![3], vec![1.0, 2.0, 3.0]));
        let s = t.sum_all(x);
        assert_eq!(t.scalar_value(s), 6.0);
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![1], vec![3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_is_constant() {
        // softmax rows sum to 1 identically, so the gradient is 0
        let mut t = Tape::<f64>::new();
        let z = t.leaf(&t64(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]), true);
        let p = t.softmax(z).unwrap();
        let loss = t.sum_all(p);
        t.backward(loss).unwrap();
        for g in t.grad(z).unwrap() {
            assert!(g.abs() < 1e-12, "softmax-sum gradient {g}");
        }
    }

    #[test]
    fn entropy_of_softmax_matches_finite_differences() {
        // H(softmax(z)) at z = (1, 2); central differences at step 1e-4
        let z = t64(vec![1, 2], vec![1.0, 2.0]);
        let err = grad_check(
            &|t, vs| {
                let p = t.softmax(vs[0])?;
                let lp = t.log_clamped(p, 1e-12);
                let plogp = t.mul(p, lp)?;
                let s = t.sum_all(plogp);
                Ok(t.scale(s, -1.0))
            },
            &[z],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "entropy grad check err {err}");
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let data = vec![0.1, -0.4, 2.3, 1.1, -2.0, 0.0];
        for &c in &[1.0f64, -3.5, 100.0] {
            let mut t = Tape::<f64>::new();
            let z = t.constant(&t64(vec![2, 3], data.clone()));
            let shifted_data: Vec<f64> = data.iter().map(|v| v + c).collect();
            let zs = t.constant(&t64(vec![2, 3], shifted_data));
            let a = t.log_softmax(z).unwrap();
            let b = t.log_softmax(zs).unwrap();
            for (x, y) in t.value(a).iter().zip(t.value(b)) {
                assert!((x - y).abs() < 1e-12, "shift {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn reused_tensor_gradients_sum_per_use() {
        // loss = sum(x * a) + sum(x * b) -> dx = a + b
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![2], vec![1.0, -2.0]), true);
        let a = t.constant(&t64(vec![2], vec![3.0, 5.0]));
        let b = t.constant(&t64(vec![2], vec![-1.0, 2.0]));
        let xa = t.mul(x, a).unwrap();
        let xb = t.mul(x, b).unwrap();
        let s = t.add(xa, xb).unwrap();
        let loss = t.sum_all(s);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![2], vec![1.0, 2.0]), true);
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn second_backward_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![1], vec![2.0]), true);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![1], vec![2.0]), true);
        let orphan = t.leaf(&t64(vec![3], vec![1.0, 1.0, 1.0]), true);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(orphan).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&t64(vec![2, 2], vec![1.0; 4]));
        let b = t.constant(&t64(vec![3], vec![1.0; 3]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn log_of_non_positive_rejected() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&t64(vec![2], vec![0.5, 0.0]));
        assert!(t.log(a).is_err());
    }

    #[test]
    fn broadcast_add_bias_over_batch() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&t64(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]), true);
        let b = t.leaf(&t64(vec![3], vec![10., 20., 30.]), true);
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y), &[11., 22., 33., 14., 25., 36.]);
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    /// Every differentiable op agrees with central differences at random
    /// points with |values| <= 3 (64-bit check mode).
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sample = |shape: Vec<usize>, lo: f64, hi: f64| -> Tensor<f64> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            Tensor::new(shape, data).unwrap()
        };

        type Case<'a> = (&'a str, Vec<Tensor<f64>>, Box<LossFn64>);
        type LossFn64 = dyn Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>;

        let cases: Vec<Case> = vec![
            ("add", vec![sample(vec![2, 3], -3.0, 3.0), sample(vec![3], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.add(v[0], v[1])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("sub", vec![sample(vec![2, 3], -3.0, 3.0), sample(vec![2, 3], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.sub(v[0], v[1])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("mul", vec![sample(vec![4], -3.0, 3.0), sample(vec![4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mul(v[0], v[1])?; Ok(t.sum_all(y)) })),
            ("div", vec![sample(vec![4], -3.0, 3.0), sample(vec![4], 0.5, 3.0)],
             Box::new(|t, v| { let y = t.div(v[0], v[1])?; Ok(t.sum_all(y)) })),
            ("exp", vec![sample(vec![5], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.exp(v[0]); Ok(t.sum_all(y)) })),
            ("log", vec![sample(vec![5], 0.1, 3.0)],
             Box::new(|t, v| { let y = t.log(v[0])?; Ok(t.sum_all(y)) })),
            ("sqrt", vec![sample(vec![5], 0.1, 3.0)],
             Box::new(|t, v| { let y = t.sqrt(v[0])?; Ok(t.sum_all(y)) })),
            ("relu", vec![sample(vec![6], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.relu(v[0]); let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("matmul", vec![sample(vec![2, 3], -3.0, 3.0), sample(vec![3, 2], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("conv2d", vec![
                sample(vec![2, 2, 5, 5], -3.0, 3.0),
                sample(vec![3, 2, 3, 3], -1.0, 1.0),
                sample(vec![3], -1.0, 1.0)],
             Box::new(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 1, 1)?; let y = t.mul(y, y)?; Ok(t.mean_all(y)) })),
            ("max_pool", vec![sample(vec![1, 2, 4, 4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.max_pool2d(v[0], 2, 2)?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("avg_pool", vec![sample(vec![1, 2, 4, 4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.avg_pool2d(v[0], 2, 2)?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("sum_axis0", vec![sample(vec![3, 4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.sum_axis0(v[0])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("mean_axis0", vec![sample(vec![3, 4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mean_axis0(v[0])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("mean_per_channel", vec![sample(vec![2, 3, 4, 4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mean_per_channel(v[0])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("add_channel", vec![sample(vec![2, 3, 2, 2], -3.0, 3.0), sample(vec![3], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.add_channel(v[0], v[1])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("mul_channel", vec![sample(vec![2, 3, 2, 2], -3.0, 3.0), sample(vec![3], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mul_channel(v[0], v[1])?; Ok(t.sum_all(y)) })),
            ("log_softmax", vec![sample(vec![3, 5], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.log_softmax(v[0])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("mean_all", vec![sample(vec![7], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean_all(y)) })),
            ("max_all", vec![sample(vec![7], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.mul(v[0], v[0])?; let m = t.max_all(y); Ok(m) })),
            ("scale_addconst", vec![sample(vec![4], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.scale(v[0], 1.7); let y = t.add_const(y, 0.3); let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
            ("log_clamped", vec![sample(vec![4], 0.2, 1.0)],
             Box::new(|t, v| { let y = t.log_clamped(v[0], 1e-12); let y = t.mul(v[0], y)?; Ok(t.sum_all(y)) })),
            ("reshape", vec![sample(vec![2, 6], -3.0, 3.0)],
             Box::new(|t, v| { let y = t.reshape(v[0], vec![3, 4])?; let y = t.mul(y, y)?; Ok(t.sum_all(y)) })),
        ];

        for (name, points, f) in cases {
            let err = grad_check(f.as_ref(), &points, 1e-4).unwrap();
            assert!(err <= 1e-4, "op {name}: grad check error {err}");
        }
    }

    #[test]
    fn finite_outputs_on_bounded_inputs() {
        // |values| <= 3 through a representative op chain stays finite
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut t = Tape::<f32>::new();
            let z = t.constant(&Tensor::new(vec![4, 6], data).unwrap());
            let p = t.softmax(z).unwrap();
            let lp = t.log_clamped(p, 1e-12);
            let e = t.mul(p, lp).unwrap();
            let s = t.sum_all(e);
            assert!(t.scalar_value(s).is_finite());
            for v in t.value(p) {
                assert!(v.is_finite());
            }
        }
    }
}
