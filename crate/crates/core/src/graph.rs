//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the inputs it was computed from. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! parameter or variable leaf.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x[.., k] · w[k, n]`
    Linear(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    /// `scale · q kᵀ` per leading-axis slice.
    Scores {
        q: NodeId,
        k: NodeId,
        scale: f64,
    },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddSiteRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    Relu(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    PadEdge(NodeId),
    Upsample2(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceTime {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    MulConst(NodeId, Tensor),
    SiteAffine {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    SiteAffineInv {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    },
    SiteScaleShift {
        x: NodeId,
        mul: Vec<f64>,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    Dot {
        x: NodeId,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

fn rows_of(t: &Tensor) -> usize {
    t.len().checked_div(*t.shape().last().unwrap_or(&1)).unwrap_or(0)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let idx = id.index();
        if self.param_nodes.len() <= idx {
            self.param_nodes.resize(idx + 1, None);
        }
        if let Some(node) = self.param_nodes[idx] {
            return node;
        }
        let node = self.variable(params.get(id).clone());
        self.param_nodes[idx] = Some(node);
        node
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, n) = wv.dims2()?;
        if xv.shape().last() != Some(&k) {
            return Err(Error::shape("linear", format!("{:?} · {:?}", xv.shape(), wv.shape())));
        }
        let rows = rows_of(xv);
        let mut out = vec![0.0; rows * n];
        matmul_into(xv.data(), wv.data(), &mut out, rows, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear(x, w), ng))
    }

    /// `x · w + b` with `b` broadcast over every row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.linear(x, w)?;
        self.add_bias(y, b)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n1, m, k) = self.value(a).dims3()?;
        let (n1b, k2, n) = self.value(b).dims3()?;
        if n1 != n1b || k != k2 {
            return Err(Error::shape("bmm", format!("{:?} ⊗ {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n1 * m * n];
        for i in 0..n1 {
            matmul_into(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new([n1, m, n], out)?, Op::Bmm(a, b), ng))
    }

    pub fn scores(&mut self, q: NodeId, k: NodeId, scale: f64) -> Result<NodeId> {
        let (n1, a, d) = self.value(q).dims3()?;
        let (n1k, b, dk) = self.value(k).dims3()?;
        if n1 != n1k || d != dk {
            return Err(Error::shape("scores", format!("q {:?} vs k {:?}", self.shape(q), self.shape(k))));
        }
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n1 * a * b];
        for i in 0..n1 {
            matmul_nt_into(
                &qv[i * a * d..(i + 1) * a * d],
                &kv[i * b * d..(i + 1) * b * d],
                &mut out[i * a * b..(i + 1) * a * b],
                a,
                d,
                b,
            );
        }
        out.iter_mut().for_each(|x| *x *= scale);
        let ng = self.ng(&[q, k]);
        Ok(self.push(Tensor::new([n1, a, b], out)?, Op::Scores { q, k, scale }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(b).len();
        if self.shape(x).last() != Some(&n) {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::AddBias(x, b), ng))
    }

    /// `x[L,T,D] + s[L,D]`, the site row broadcast over time.
    pub fn add_site_row(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (l, t, d) = self.value(x).dims3()?;
        if self.value(s).shape() != [l, d] {
            return Err(Error::shape("add_site_row", format!("{:?} + {:?}", self.shape(x), self.shape(s))));
        }
        let mut v = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for li in 0..l {
            for ti in 0..t {
                let base = (li * t + ti) * d;
                for di in 0..d {
                    v.data_mut()[base + di] += sv[li * d + di];
                }
            }
        }
        let ng = self.ng(&[x, s]);
        Ok(self.push(v, Op::AddSiteRow(x, s), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Softmax over the last axis with the row maximum subtracted first.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let n = *v.shape().last().unwrap();
        for row in v.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    /// Same-length 1-D convolution along time: `x[L,T,Cin]`, `w[c,Cin,Cout]`,
    /// `b[Cout]`, zero padding of `(c-1)/2` on both ends.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (l, t, cin) = self.value(x).dims3()?;
        let (c, cin_w, cout) = self.value(w).dims3()?;
        if cin != cin_w || self.value(b).len() != cout || c % 2 == 0 {
            return Err(Error::shape("conv1d", format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b))));
        }
        let pad = (c - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; l * t * cout];
        for li in 0..l {
            let xs = &xv[li * t * cin..(li + 1) * t * cin];
            let ys = &mut out[li * t * cout..(li + 1) * t * cout];
            for j in 0..c {
                let Some((t_lo, t_hi)) = conv_rows(t, j, pad) else { continue };
                let src_lo = t_lo + j - pad;
                let n = t_hi - t_lo;
                matmul_into(
                    &xs[src_lo * cin..(src_lo + n) * cin],
                    &wv[j * cin * cout..(j + 1) * cin * cout],
                    &mut ys[t_lo * cout..t_hi * cout],
                    n,
                    cin,
                    cout,
                );
            }
        }
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::new([l, t, cout], out)?, Op::Conv1d { x, w, b }, ng))
    }

    /// Width-2, stride-2 max pooling along time. Time length must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (l, t, c) = self.value(x).dims3()?;
        if t % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd time length {t}")));
        }
        let h = t / 2;
        let xv = self.value(x).data();
        let mut out = vec![0.0; l * h * c];
        let mut argmax = vec![0; l * h * c];
        for li in 0..l {
            for ti in 0..h {
                for ci in 0..c {
                    let a = (li * t + 2 * ti) * c + ci;
                    let b = a + c;
                    let pick = if xv[b] > xv[a] { b } else { a };
                    let o = (li * h + ti) * c + ci;
                    out[o] = xv[pick];
                    argmax[o] = pick;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new([l, h, c], out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Extend time by `extra` copies of the last step.
    pub fn pad_edge(&mut self, x: NodeId, extra: usize) -> Result<NodeId> {
        let (l, t, c) = self.value(x).dims3()?;
        if t == 0 {
            return Err(Error::shape("pad_edge", "empty time axis"));
        }
        let xv = self.value(x);
        let v = Tensor::from_fn([l, t + extra, c], |i| {
            let (li, rest) = (i / ((t + extra) * c), i % ((t + extra) * c));
            let (ti, ci) = (rest / c, rest % c);
            xv.data()[(li * t + ti.min(t - 1)) * c + ci]
        });
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::PadEdge(x), ng))
    }

    /// Nearest-neighbour ×2 upsampling along time, truncated to `out_len`.
    pub fn upsample2(&mut self, x: NodeId, out_len: usize) -> Result<NodeId> {
        let (l, t, c) = self.value(x).dims3()?;
        if out_len > 2 * t {
            return Err(Error::shape("upsample2", format!("cannot reach {out_len} from {t}")));
        }
        let xv = self.value(x);
        let v = Tensor::from_fn([l, out_len, c], |i| {
            let (li, rest) = (i / (out_len * c), i % (out_len * c));
            let (ti, ci) = (rest / c, rest % c);
            xv.data()[(li * t + ti / 2) * c + ci]
        });
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Upsample2(x), ng))
    }

    /// Concatenate rank-3 tensors along axis 1 (time) or 2 (channels).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || !(1..=2).contains(&axis) {
            return Err(Error::shape("concat", format!("{} parts on axis {axis}", parts.len())));
        }
        let (l, t0, c0) = self.value(parts[0]).dims3()?;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let (lp, tp, cp) = self.value(p).dims3()?;
            let ok = lp == l && if axis == 1 { cp == c0 } else { tp == t0 };
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", self.shape(p), self.shape(parts[0]))));
            }
            sizes.push(if axis == 1 { tp } else { cp });
        }
        let total: usize = sizes.iter().sum();
        let shape = if axis == 1 { [l, total, c0] } else { [l, t0, total] };
        let mut out = Vec::with_capacity(shape.iter().product());
        // With row-major layout, every part contributes a contiguous chunk per
        // outer index: per site for time concat, per (site, step) for channels.
        let outer = if axis == 1 { l } else { l * t0 };
        for o in 0..outer {
            for (&p, &s) in parts.iter().zip(&sizes) {
                let chunk = if axis == 1 { s * c0 } else { s };
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Time steps `start..end` of a rank-3 tensor.
    pub fn slice_time(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (l, t, c) = self.value(x).dims3()?;
        if start > end || end > t {
            return Err(Error::shape("slice_time", format!("{start}..{end} of {t}")));
        }
        let n = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(l * n * c);
        for li in 0..l {
            out.extend_from_slice(&xv[(li * t + start) * c..(li * t + end) * c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new([l, n, c], out)?, Op::SliceTime { x, start }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, m: Tensor) -> Result<NodeId> {
        if self.shape(x) != m.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.shape(x), m.shape())));
        }
        let mut v = self.value(x).clone();
        for (a, b) in v.data_mut().iter_mut().zip(m.data()) {
            *a *= b;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::MulConst(x, m), ng))
    }

    fn site_chunk(&self, x: NodeId, per_site: NodeId, ctx: &'static str) -> Result<usize> {
        let l = self.shape(x).first().copied().unwrap_or(0);
        if self.value(per_site).len() != l || l == 0 {
            return Err(Error::shape(ctx, format!("{:?} vs {:?}", self.shape(x), self.shape(per_site))));
        }
        Ok(self.value(x).len() / l)
    }

    /// `x·scale[l] + shift[l]` for every element of site `l` (axis 0).
    pub fn site_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let chunk = self.site_chunk(x, scale, "site_affine")?;
        self.site_chunk(x, shift, "site_affine")?;
        let (s, b) = (self.value(scale).data().to_vec(), self.value(shift).data().to_vec());
        let mut v = self.value(x).clone();
        for (l, part) in v.data_mut().chunks_mut(chunk).enumerate() {
            part.iter_mut().for_each(|a| *a = *a * s[l] + b[l]);
        }
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(v, Op::SiteAffine { x, scale, shift }, ng))
    }

    /// Inverse of [`Graph::site_affine`]: `(x - shift[l]) / (scale[l] + eps)`.
    pub fn site_affine_inv(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let chunk = self.site_chunk(x, scale, "site_affine_inv")?;
        self.site_chunk(x, shift, "site_affine_inv")?;
        let (s, b) = (self.value(scale).data().to_vec(), self.value(shift).data().to_vec());
        let mut v = self.value(x).clone();
        for (l, part) in v.data_mut().chunks_mut(chunk).enumerate() {
            part.iter_mut().for_each(|a| *a = (*a - b[l]) / (s[l] + eps));
        }
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(v, Op::SiteAffineInv { x, scale, shift, eps }, ng))
    }

    /// `x·mul[l] + add[l]` with constant per-site coefficients.
    pub fn site_scale_shift(&mut self, x: NodeId, mul: &[f64], add: &[f64]) -> Result<NodeId> {
        let l = self.shape(x).first().copied().unwrap_or(0);
        if mul.len() != l || add.len() != l || l == 0 {
            return Err(Error::shape("site_scale_shift", format!("{:?} vs {} sites", self.shape(x), mul.len())));
        }
        let chunk = self.value(x).len() / l;
        let mut v = self.value(x).clone();
        for (li, part) in v.data_mut().chunks_mut(chunk).enumerate() {
            part.iter_mut().for_each(|a| *a = *a * mul[li] + add[li]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::SiteScaleShift { x, mul: mul.to_vec() }, ng))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let n = p.len() as f64;
        let loss = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.clone() }, ng))
    }

    /// `Σ x ⊙ weights`; scalar output.
    pub fn dot(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        if self.value(x).len() != weights.len() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape(x), weights.shape())));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights: weights.clone() }, ng))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter, zeros for those the graph never touched.
    pub fn param_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                self.param_nodes
                    .get(id.index())
                    .copied()
                    .flatten()
                    .and_then(|n| grads.get(n).cloned())
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape().to_vec()))
            })
            .collect()
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let rows = rows_of(xv);
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * k];
                    matmul_nt_into(dy.data(), wv.data(), &mut dx, rows, n, k);
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    matmul_tn_into(xv.data(), dy.data(), &mut dw, k, rows, n);
                    accumulate(grads, *w, wv.shape(), dw);
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n1, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; n1 * m * k];
                    for i in 0..n1 {
                        matmul_nt_into(
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n1 * k * n];
                    for i in 0..n1 {
                        matmul_tn_into(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Scores { q, k, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (n1, a, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let b = kv.shape()[1];
                let dys: Vec<f64> = dy.data().iter().map(|g| g * scale).collect();
                if self.wants(*q) {
                    let mut dq = vec![0.0; n1 * a * d];
                    for i in 0..n1 {
                        matmul_into(
                            &dys[i * a * b..(i + 1) * a * b],
                            &kv.data()[i * b * d..(i + 1) * b * d],
                            &mut dq[i * a * d..(i + 1) * a * d],
                            a,
                            b,
                            d,
                        );
                    }
                    accumulate(grads, *q, qv.shape(), dq);
                }
                if self.wants(*k) {
                    let mut dk = vec![0.0; n1 * b * d];
                    for i in 0..n1 {
                        matmul_tn_into(
                            &dys[i * a * b..(i + 1) * a * b],
                            &qv.data()[i * a * d..(i + 1) * a * d],
                            &mut dk[i * b * d..(i + 1) * b * d],
                            b,
                            a,
                            d,
                        );
                    }
                    accumulate(grads, *k, kv.shape(), dk);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        accumulate(grads, *p, dy.shape(), dy.data().to_vec());
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.shape(), dy.data().to_vec());
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (o, g) in db.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), db);
                }
            }
            Op::AddSiteRow(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.shape(), dy.data().to_vec());
                }
                if self.wants(*s) {
                    let (l, t, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
                    let mut ds = vec![0.0; l * d];
                    for li in 0..l {
                        for ti in 0..t {
                            for di in 0..d {
                                ds[li * d + di] += dy.data()[(li * t + ti) * d + di];
                            }
                        }
                    }
                    accumulate(grads, *s, self.shape(*s), ds);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, dy.shape(), dy.data().iter().map(|g| g * s).collect());
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (g - dot);
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Relu(x) => {
                let dx = y.data().iter().zip(dy.data()).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Conv1d { x, w, b } => self.backprop_conv(*x, *w, *b, dy, grads),
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx[src] += g;
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::PadEdge(x) => {
                let (l, t, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let tp = y.shape()[1];
                let mut dx = vec![0.0; l * t * c];
                for li in 0..l {
                    for ti in 0..tp {
                        let src = ti.min(t - 1);
                        for ci in 0..c {
                            dx[(li * t + src) * c + ci] += dy.data()[(li * tp + ti) * c + ci];
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Upsample2(x) => {
                let (l, t, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let to = y.shape()[1];
                let mut dx = vec![0.0; l * t * c];
                for li in 0..l {
                    for ti in 0..to {
                        for ci in 0..c {
                            dx[(li * t + ti / 2) * c + ci] += dy.data()[(li * to + ti) * c + ci];
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Concat { parts, axis } => {
                let (l, t, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let outer = if *axis == 1 { l } else { l * t };
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p)[*axis];
                    let (chunk, stride, skip) = if *axis == 1 { (s * c, t * c, offset * c) } else { (s, c, offset) };
                    offset += s;
                    if !self.wants(p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        dp.extend_from_slice(&dy.data()[o * stride + skip..o * stride + skip + chunk]);
                    }
                    accumulate(grads, p, self.shape(p), dp);
                }
            }
            Op::SliceTime { x, start } => {
                let (l, t, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let n = y.shape()[1];
                let mut dx = vec![0.0; l * t * c];
                for li in 0..l {
                    dx[(li * t + start) * c..(li * t + start + n) * c].copy_from_slice(&dy.data()[li * n * c..(li + 1) * n * c]);
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, self.shape(*x), dy.data().to_vec()),
            Op::MulConst(x, m) => {
                let dx = dy.data().iter().zip(m.data()).map(|(g, mm)| g * mm).collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::SiteAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let s = self.value(*scale).data();
                let chunk = xv.len() / s.len();
                if self.wants(*x) {
                    let dx = dy.data().iter().enumerate().map(|(i, g)| g * s[i / chunk]).collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0; s.len()];
                    for (i, (g, xx)) in dy.data().iter().zip(xv.data()).enumerate() {
                        ds[i / chunk] += g * xx;
                    }
                    accumulate(grads, *scale, self.shape(*scale), ds);
                }
                if self.wants(*shift) {
                    let mut db = vec![0.0; s.len()];
                    for (i, g) in dy.data().iter().enumerate() {
                        db[i / chunk] += g;
                    }
                    accumulate(grads, *shift, self.shape(*shift), db);
                }
            }
            Op::SiteAffineInv { x, scale, shift, eps } => {
                let xv = self.value(*x);
                let s = self.value(*scale).data();
                let b = self.value(*shift).data();
                let chunk = xv.len() / s.len();
                if self.wants(*x) {
                    let dx = dy.data().iter().enumerate().map(|(i, g)| g / (s[i / chunk] + eps)).collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0; s.len()];
                    for (i, (g, xx)) in dy.data().iter().zip(xv.data()).enumerate() {
                        let l = i / chunk;
                        let den = s[l] + eps;
                        ds[l] -= g * (xx - b[l]) / (den * den);
                    }
                    accumulate(grads, *scale, self.shape(*scale), ds);
                }
                if self.wants(*shift) {
                    let mut db = vec![0.0; s.len()];
                    for (i, g) in dy.data().iter().enumerate() {
                        let l = i / chunk;
                        db[l] -= g / (s[l] + eps);
                    }
                    accumulate(grads, *shift, self.shape(*shift), db);
                }
            }
            Op::SiteScaleShift { x, mul } => {
                let chunk = y.len() / mul.len();
                let dx = dy.data().iter().enumerate().map(|(i, g)| g * mul[i / chunk]).collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let g = dy.data()[0] * 2.0 / p.len() as f64;
                let dx = p.data().iter().zip(target.data()).map(|(a, b)| g * (a - b)).collect();
                accumulate(grads, *pred, p.shape(), dx);
            }
            Op::Dot { x, weights } => {
                let g = dy.data()[0];
                let dx = weights.data().iter().map(|w| g * w).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
        }
    }

    fn backprop_conv(&self, x: NodeId, w: NodeId, b: NodeId, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (l, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c, cout) = (wv.shape()[0], wv.shape()[2]);
        let pad = (c - 1) / 2;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0; l * t * cin] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; c * cin * cout] } else { Vec::new() };
        for li in 0..l {
            let xs = &xv.data()[li * t * cin..(li + 1) * t * cin];
            let gs = &dy.data()[li * t * cout..(li + 1) * t * cout];
            for j in 0..c {
                let Some((t_lo, t_hi)) = conv_rows(t, j, pad) else { continue };
                let src_lo = t_lo + j - pad;
                let n = t_hi - t_lo;
                let wj = &wv.data()[j * cin * cout..(j + 1) * cin * cout];
                if want_x {
                    matmul_nt_into(
                        &gs[t_lo * cout..t_hi * cout],
                        wj,
                        &mut dx[li * t * cin + src_lo * cin..li * t * cin + (src_lo + n) * cin],
                        n,
                        cout,
                        cin,
                    );
                }
                if want_w {
                    matmul_tn_into(
                        &xs[src_lo * cin..(src_lo + n) * cin],
                        &gs[t_lo * cout..t_hi * cout],
                        &mut dw[j * cin * cout..(j + 1) * cin * cout],
                        cin,
                        n,
                        cout,
                    );
                }
            }
        }
        if want_x {
            accumulate(grads, x, xv.shape(), dx);
        }
        if want_w {
            accumulate(grads, w, wv.shape(), dw);
        }
        if self.wants(b) {
            let mut db = vec![0.0; cout];
            for row in dy.data().chunks(cout) {
                for (o, g) in db.iter_mut().zip(row) {
                    *o += g;
                }
            }
            accumulate(grads, b, self.shape(b), db);
        }
    }
}

/// Output rows `[lo, hi)` whose tap `j` reads an in-bounds input step.
fn conv_rows(t: usize, j: usize, pad: usize) -> Option<(usize, usize)> {
    // source = out + j - pad must lie in [0, t)
    let lo = pad.saturating_sub(j);
    let hi = (t + pad).saturating_sub(j).min(t);
    (lo < hi).then_some((lo, hi))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}
