//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! Every method on [`Graph`] evaluates its operation eagerly and records it
//! on the tape. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar node with respect to every node that depends on a
//! parameter. Image tensors use the channels-last layout `[B, H, W, C]`.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Geometry of a same-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Same padding: `out = ceil(in / stride)`; when the total padding is odd
    /// the extra row/column goes on the high side (so a 2x2 kernel at stride 1
    /// pads only bottom and right).
    fn new(shape: &[usize], kh: usize, kw: usize, stride: usize) -> Self {
        let (batch, h, w, cin) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
        Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            ho,
            wo,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut col = vec![T::zero(); self.rows() * patch];
        for b in 0..self.batch {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let row = ((b * self.ho + oh) * self.wo + ow) * patch;
                    for i in 0..self.kh {
                        let ih = (oh * self.stride + i) as isize - self.pad_top as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.kw {
                            let iw = (ow * self.stride + j) as isize - self.pad_left as isize;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + ih as usize) * self.w + iw as usize) * self.cin;
                            let dst = row + (i * self.kw + j) * self.cin;
                            col[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let row = ((b * self.ho + oh) * self.wo + ow) * patch;
                    for i in 0..self.kh {
                        let ih = (oh * self.stride + i) as isize - self.pad_top as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.kw {
                            let iw = (ow * self.stride + j) as isize - self.pad_left as isize;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + ih as usize) * self.w + iw as usize) * self.cin;
                            let src = row + (i * self.kw + j) * self.cin;
                            for c in 0..self.cin {
                                dx[dst + c] += col[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        col: Option<Vec<T>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchMatmul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
    },
    Softmax {
        x: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Swish {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddChannelBias {
        x: NodeId,
        v: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: T,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    record: bool,
    branches: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

const GN_EPS: f64 = 1e-5;
const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A tape that keeps everything backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            branches: BRANCH_SEED,
        }
    }

    /// A forward-only tape: parameters are treated as constants and no
    /// backward state is stored.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: false,
            branches: BRANCH_SEED,
        }
    }

    /// Hash of every piecewise choice made so far (max-pool winners, ReLU
    /// signs). Two evaluations with equal signatures ran through the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branch(&mut self, choice: u64) {
        self.branches = (self.branches ^ choice).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids of all parameters pulled into this graph, by name.
    pub fn param_nodes(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient without being a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a named parameter into the graph; repeated requests return the
    /// same node so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [B,H,W,C] input and [kh,kw,Cin,Cout] kernel, got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if xs[3] != ws[2] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                xs[3], ws[2]
            )));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom::new(&xs, ws[0], ws[1], stride);
        let rows = geom.rows();
        let mut out = vec![T::zero(); rows * cout];
        let col = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(self.value(x).data()))
        };
        {
            let lhs = col.as_deref().unwrap_or_else(|| self.value(x).data());
            matmul(lhs, self.value(w).data(), &mut out, rows, geom.patch(), cout, false, false, false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let keep = if needs && self.record { col } else { None };
        let value = Tensor::from_vec(&[geom.batch, geom.ho, geom.wo, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, col: keep }, needs))
    }

    /// `x[..., K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| Error::shape("linear on rank-0 input"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape(format!(
                "linear input last dim {k} does not match weight {ws:?}"
            )));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!(
                    "linear bias shape {:?}, expected [{n}]",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(x).data(), self.value(w).data(), &mut out, m, k, n, false, false, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// Batched product of `a[B,M,K]` with `b[B,K,N]`, or with `b[B,N,K]`
    /// transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul on {sa:?} and {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!(
                "batch_matmul inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                matmul(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                    false,
                );
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_vec(&[batch, m, n], out)?,
            Op::BatchMatmul {
                a,
                b,
                trans_b,
                dims: (batch, m, k, n),
            },
            needs,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax on rank-0 input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { x }, needs))
    }

    /// Group normalisation over `[B, ..., C]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("group_norm needs a batch and a channel axis"));
        }
        let c = shape[shape.len() - 1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!(
                "{c} channels are not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("group_norm affine must be [{c}]")));
        }
        let batch = shape[0];
        let positions = self.value(x).len() / (batch * c);
        let cg = c / groups;
        let count = T::from_usize(positions * cg).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let base = b * positions * c;
            for grp in 0..groups {
                let mut mean = T::zero();
                for p in 0..positions {
                    let off = base + p * c + grp * cg;
                    for &v in &xv[off..off + cg] {
                        mean += v;
                    }
                }
                mean /= count;
                let mut var = T::zero();
                for p in 0..positions {
                    let off = base + p * c + grp * cg;
                    for &v in &xv[off..off + cg] {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= count;
                let r = T::one() / (var + T::lit(GN_EPS)).sqrt();
                rstd[b * groups + grp] = r;
                for p in 0..positions {
                    let off = base + p * c + grp * cg;
                    for k in 0..cg {
                        let ch = grp * cg + k;
                        let xh = (xv[off + k] - mean) * r;
                        xhat[off + k] = xh;
                        out[off + k] = xh * g[ch] + bta[ch];
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if needs && self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| a * sigmoid(a)).collect();
        let t = Tensor::from_vec(v.shape(), out).unwrap();
        let needs = self.ng(x);
        self.push(t, Op::Swish { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let t = Tensor::from_vec(v.shape(), out).unwrap();
        let signs: Vec<u64> = v.data().iter().map(|&a| u64::from(a > T::zero())).collect();
        for (i, s) in signs.into_iter().enumerate() {
            self.note_branch(((i as u64) << 1) | s);
        }
        let needs = self.ng(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// 2x2 max pooling with stride 2 on `[B,H,W,C]`; H and W must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(format!("max_pool2 needs [B,even H,even W,C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for oh in 0..ho {
                for ow in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * oh + dy) * w + 2 * ow + dx) * c + ch;
                            if best == usize::MAX || xv[idx] > best_v {
                                best = idx;
                                best_v = xv[idx];
                            }
                        }
                        let o = ((bi * ho + oh) * wo + ow) * c + ch;
                        out[o] = best_v;
                        argmax[o] = best;
                    }
                }
            }
        }
        for &a in &argmax {
            self.note_branch(a as u64);
        }
        let needs = self.ng(x);
        let argmax = if needs { argmax } else { Vec::new() };
        Ok(self.push(
            Tensor::from_vec(&[b, ho, wo, c], out)?,
            Op::MaxPool2 { x, argmax },
            needs,
        ))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2 needs [B,H,W,C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for oh in 0..2 * h {
                for ow in 0..2 * w {
                    let src = ((bi * h + oh / 2) * w + ow / 2) * c;
                    let dst = ((bi * 2 * h + oh) * 2 * w + ow) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[b, 2 * h, 2 * w, c], out)?,
            Op::Upsample2 { x },
            needs,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat_channels on {sa:?} and {sb:?}")));
        }
        let ca = sa[sa.len() - 1];
        let cb = sb[sb.len() - 1];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = av.len() / ca.max(1);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::ConcatChannels { a, b, ca, cb },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, needs))
    }

    /// Adds `v[B, C]` to every position of `x[B, ..., C]`.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if vs.len() != 2 || xs[0] != vs[0] || xs[xs.len() - 1] != vs[1] {
            return Err(Error::shape(format!("add_channel_bias on {xs:?} and {vs:?}")));
        }
        let (batch, c) = (vs[0], vs[1]);
        let per = self.value(x).len() / batch;
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for b in 0..batch {
            for row in out[b * per..(b + 1) * per].chunks_exact_mut(c) {
                for (o, &bv) in row.iter_mut().zip(&vv[b * c..(b + 1) * c]) {
                    *o += bv;
                }
            }
        }
        let needs = self.ng(x) || self.ng(v);
        Ok(self.push(Tensor::from_vec(&xs, out)?, Op::AddChannelBias { x, v }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| a * s).collect();
        let t = Tensor::from_vec(v.shape(), out).unwrap();
        let needs = self.ng(x);
        self.push(t, Op::Scale { x, s }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: T = self.value(x).data().iter().copied().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(format!(
                "mse on {:?} and {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let needs = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred, target }, needs))
    }

    /// Gradients of the scalar `loss` with respect to every node on its
    /// dependency path.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let numel = self.value(loss).len();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Pushes gradient sums for each named parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &id) in &self.params {
            if let Some(g) = grads.get(id) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Tensor<T> {
        Tensor::zeros(self.shape(id))
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, col } => {
                let cout = self.shape(*w)[3];
                let rows = geom.rows();
                let patch = geom.patch();
                let lhs = col.as_deref().unwrap_or_else(|| self.value(*x).data());
                if self.ng(*w) {
                    let mut dw = self.zeros_like(*w);
                    matmul(lhs, gd, dw.data_mut(), patch, rows, cout, true, false, false);
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accum(grads, *b, Tensor::from_vec(&[cout], db).unwrap());
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = self.zeros_like(*x);
                    if geom.is_pointwise() {
                        matmul(gd, wv, dx.data_mut(), rows, cout, patch, false, true, false);
                    } else {
                        let mut dcol = vec![T::zero(); rows * patch];
                        matmul(gd, wv, &mut dcol, rows, cout, patch, false, true, false);
                        geom.col2im(&dcol, dx.data_mut());
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = gd.len() / n.max(1);
                if self.ng(*w) {
                    let mut dw = self.zeros_like(*w);
                    matmul(self.value(*x).data(), gd, dw.data_mut(), k, m, n, true, false, false);
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); n];
                        for row in gd.chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accum(grads, *b, Tensor::from_vec(&[n], db).unwrap());
                    }
                }
                if self.ng(*x) {
                    let mut dx = self.zeros_like(*x);
                    matmul(gd, self.value(*w).data(), dx.data_mut(), m, n, k, false, true, false);
                    self.accum(grads, *x, dx);
                }
            }
            Op::BatchMatmul {
                a,
                b,
                trans_b,
                dims: (batch, m, k, n),
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let mut da = self.zeros_like(*a);
                    for i in 0..batch {
                        // dA = dC · op(B)^T
                        matmul(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                            false,
                        );
                    }
                    self.accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = self.zeros_like(*b);
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [N,K]: dB = dC^T · A
                            matmul(gi, ai, dbi, n, m, k, true, false, false);
                        } else {
                            matmul(ai, gi, dbi, k, m, n, true, false, false);
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = self.zeros_like(*x);
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(y.chunks_exact(n))
                    .zip(gd.chunks_exact(n))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape();
                let c = shape[shape.len() - 1];
                let batch = shape[0];
                let positions = gd.len() / (batch * c);
                let cg = c / groups;
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (row_g, row_x) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dg[ch] += row_g[ch] * row_x[ch];
                            dbeta[ch] += row_g[ch];
                        }
                    }
                    self.accum(grads, *gamma, Tensor::from_vec(&[c], dg).unwrap());
                    self.accum(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                }
                if self.ng(*x) {
                    let mut dx = self.zeros_like(*x);
                    let count = T::from_usize(positions * cg).unwrap();
                    let dxd = dx.data_mut();
                    for b in 0..batch {
                        let base = b * positions * c;
                        for grp in 0..*groups {
                            let r = rstd[b * groups + grp];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for p in 0..positions {
                                let off = base + p * c + grp * cg;
                                for k in 0..cg {
                                    let d = gd[off + k] * gam[grp * cg + k];
                                    mean_d += d;
                                    mean_dx += d * xhat[off + k];
                                }
                            }
                            mean_d /= count;
                            mean_dx /= count;
                            for p in 0..positions {
                                let off = base + p * c + grp * cg;
                                for k in 0..cg {
                                    let d = gd[off + k] * gam[grp * cg + k];
                                    dxd[off + k] = r * (d - mean_d - xhat[off + k] * mean_dx);
                                }
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Swish { x } => {
                let xv = self.value(*x).data();
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gv)| {
                        let s = sigmoid(a);
                        gv * s * (T::one() + a * (T::one() - s))
                    })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), d).unwrap());
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), d).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = self.zeros_like(*x);
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx.data_mut()[idx] += gv;
                }
                self.accum(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = self.zeros_like(*x);
                let dxd = dx.data_mut();
                for bi in 0..b {
                    for oh in 0..2 * h {
                        for ow in 0..2 * w {
                            let dst = ((bi * h + oh / 2) * w + ow / 2) * c;
                            let src = ((bi * 2 * h + oh) * 2 * w + ow) * c;
                            for ch in 0..c {
                                dxd[dst + ch] += gd[src + ch];
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::ConcatChannels { a, b, ca, cb } => {
                let rows = gd.len() / (ca + cb);
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&gd[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accum(grads, *a, Tensor::from_vec(self.shape(*a), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&gd[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddChannelBias { x, v } => {
                self.accum(grads, *x, g.clone());
                if self.ng(*v) {
                    let vs = self.shape(*v);
                    let (batch, c) = (vs[0], vs[1]);
                    let per = gd.len() / batch;
                    let mut dv = vec![T::zero(); batch * c];
                    for b in 0..batch {
                        for row in gd[b * per..(b + 1) * per].chunks_exact(c) {
                            for (d, &gv) in dv[b * c..(b + 1) * c].iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                    self.accum(grads, *v, Tensor::from_vec(vs, dv).unwrap());
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let d: Vec<T> = gd.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(self.shape(*a), d).unwrap());
                }
                if self.ng(*b) {
                    let d: Vec<T> = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), d).unwrap());
                }
            }
            Op::Scale { x, s } => {
                let d: Vec<T> = gd.iter().map(|&gv| gv * *s).collect();
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), d).unwrap());
            }
            Op::Reshape { x } => {
                let t = g.clone().reshaped(self.shape(*x)).unwrap();
                self.accum(grads, *x, t);
            }
            Op::Sum { x } => {
                self.accum(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let tv = self.value(*target).data();
                let k = T::lit(2.0) * gd[0] / T::from_usize(pv.len()).unwrap();
                if self.ng(*pred) {
                    let d: Vec<T> = pv.iter().zip(tv).map(|(&p, &t)| k * (p - t)).collect();
                    self.accum(grads, *pred, Tensor::from_vec(self.shape(*pred), d).unwrap());
                }
                if self.ng(*target) {
                    let d: Vec<T> = pv.iter().zip(tv).map(|(&p, &t)| k * (t - p)).collect();
                    self.accum(grads, *target, Tensor::from_vec(self.shape(*target), d).unwrap());
                }
            }
        }
    }
}
