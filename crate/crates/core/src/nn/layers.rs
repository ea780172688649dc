//! Parameterised building blocks. Each block knows its parameter names and
//! shapes (`init`) and how to apply itself on a [`Graph`] (`forward`).

use super::graph::{Graph, NodeId};
use super::params::{Init, ParamStore};
use super::tensor::Scalar;
use crate::error::Result;

pub const NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub kernel: (usize, usize),
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            kernel: (k, k),
            cin,
            cout,
            bias: true,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (kh, kw) = self.kernel;
        store.add(
            &format!("{}.w", self.name),
            &[kh, kw, self.cin, self.cout],
            Init::FanIn(kh * kw * self.cin),
        )?;
        if self.bias {
            store.add(&format!("{}.b", self.name), &[self.cout], Init::Zeros)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(g.param(store, &format!("{}.b", self.name))?)
        } else {
            None
        };
        g.conv2d(x, w, b, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.add(
            &format!("{}.w", self.name),
            &[self.din, self.dout],
            Init::FanIn(self.din),
        )?;
        if self.bias {
            store.add(&format!("{}.b", self.name), &[self.dout], Init::Zeros)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(g.param(store, &format!("{}.b", self.name))?)
        } else {
            None
        };
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups: NORM_GROUPS,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.add(&format!("{}.gamma", self.name), &[self.channels], Init::Ones)?;
        store.add(&format!("{}.beta", self.name), &[self.channels], Init::Zeros)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// `softmax(q kᵀ / sqrt(d)) v` for `q[B,Lq,d]`, `k[B,Lk,d]`, `v[B,Lk,dv]`.
/// Returns the attended values and the attention weights.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(scores)?;
    let out = g.batch_matmul(weights, v, false)?;
    Ok((out, weights))
}

/// Two norm-swish-conv stages with an additive step-embedding projection in
/// between and a residual connection (1x1 conv when widths differ).
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub temb_dim: Option<usize>,
}

impl ResBlock {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, temb_dim: Option<usize>) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            temb_dim,
        }
    }

    fn parts(&self) -> (GroupNorm, Conv, Option<Dense>, GroupNorm, Conv, Option<Conv>) {
        let n = &self.name;
        (
            GroupNorm::new(format!("{n}.norm1"), self.cin),
            Conv::new(format!("{n}.conv1"), 3, self.cin, self.cout),
            self.temb_dim
                .map(|t| Dense::new(format!("{n}.temb"), t, self.cout)),
            GroupNorm::new(format!("{n}.norm2"), self.cout),
            Conv::new(format!("{n}.conv2"), 3, self.cout, self.cout),
            (self.cin != self.cout).then(|| Conv::new(format!("{n}.skip"), 1, self.cin, self.cout)),
        )
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (n1, c1, t, n2, c2, skip) = self.parts();
        n1.init(store)?;
        c1.init(store)?;
        if let Some(t) = t {
            t.init(store)?;
        }
        n2.init(store)?;
        c2.init(store)?;
        if let Some(s) = skip {
            s.init(store)?;
        }
        Ok(())
    }

    /// `temb` is `[B, temb_dim]` when the block was built with a step
    /// embedding.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        temb: Option<NodeId>,
    ) -> Result<NodeId> {
        let (n1, c1, t, n2, c2, skip) = self.parts();
        let h = n1.forward(g, store, x)?;
        let h = g.swish(h);
        let mut h = c1.forward(g, store, h)?;
        if let (Some(t), Some(temb)) = (t, temb) {
            let e = g.swish(temb);
            let e = t.forward(g, store, e)?;
            h = g.add_channel_bias(h, e)?;
        }
        let h = n2.forward(g, store, h)?;
        let h = g.swish(h);
        let h = c2.forward(g, store, h)?;
        let residual = match skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(residual, h)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub name: String,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    fn parts(&self) -> (GroupNorm, [Dense; 4]) {
        let n = &self.name;
        let c = self.channels;
        (
            GroupNorm::new(format!("{n}.norm"), c),
            [
                Dense::new(format!("{n}.q"), c, c),
                Dense::new(format!("{n}.k"), c, c),
                Dense::new(format!("{n}.v"), c, c),
                Dense::new(format!("{n}.out"), c, c),
            ],
        )
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (norm, dense) = self.parts();
        norm.init(store)?;
        for d in &dense {
            d.init(store)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (norm, [dq, dk, dv, dout]) = self.parts();
        let hn = norm.forward(g, store, x)?;
        let flat = g.reshape(hn, &[b, h * w, c])?;
        let q = dq.forward(g, store, flat)?;
        let k = dk.forward(g, store, flat)?;
        let v = dv.forward(g, store, flat)?;
        let (att, _) = attention(g, q, k, v)?;
        let o = dout.forward(g, store, att)?;
        let o = g.reshape(o, &shape)?;
        g.add(x, o)
    }
}
