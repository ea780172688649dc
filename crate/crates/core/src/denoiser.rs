//! The noise-prediction network: a cross-attention block that mixes the
//! condition embedding into the noisy sample, followed by a U-Net.
//!
//! Level `j` of the U-Net runs at `H/2^j x W/2^j` with width
//! `base_width * (j + 1)`. After `depth` poolings a bottleneck runs at the
//! coarsest resolution. Self-attention sits at the two coarsest
//! resolutions: the deepest level and the bottleneck.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::nn::layers::{attention, Conv, Dense, GroupNorm, ResBlock, SelfAttention, NORM_GROUPS};
use crate::nn::{Graph, NodeId, ParamStore, Scalar, StepEmbedding, Tensor};

pub const MAX_DEPTH: usize = 4;
const MAX_POS_FREQS: usize = 16;

/// How the cross-attention output meets the noisy sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `x_n + W_o attn`, `C` channels into the U-Net.
    Residual,
    /// `[x_n, W_o attn]` stacked on channels, `2C` into the U-Net.
    Concat,
}

/// Largest `k <= MAX_DEPTH` with `2^k` dividing both `h` and `w`.
pub fn unet_depth(h: usize, w: usize) -> usize {
    (0..=MAX_DEPTH)
        .rev()
        .find(|&k| h % (1 << k) == 0 && w % (1 << k) == 0)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// Width of a condition-embedding row (`2 * d_e`).
    pub cond_dim: usize,
    /// Query/key/value width of the cross-attention block.
    pub attn_dim: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Add fixed latitude/longitude features to queries and keys.
    pub positional: bool,
    pub fusion: Fusion,
}

impl DenoiserArch {
    pub fn new(
        h: usize,
        w: usize,
        channels: usize,
        cond_dim: usize,
        attn_dim: usize,
        base_width: usize,
    ) -> Result<Self> {
        let arch = Self {
            h,
            w,
            channels,
            cond_dim,
            attn_dim,
            base_width,
            depth: unet_depth(h, w),
            positional: true,
            fusion: Fusion::Residual,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth == 0 || self.depth > MAX_DEPTH {
            bad.push(format!("depth must be in 1..={MAX_DEPTH}, got {}", self.depth));
        } else if self.h % (1 << self.depth) != 0 || self.w % (1 << self.depth) != 0 {
            bad.push(format!(
                "grid {}x{} is not divisible by 2^{}",
                self.h, self.w, self.depth
            ));
        }
        if self.channels == 0 || self.cond_dim == 0 || self.attn_dim == 0 {
            bad.push("channels, cond_dim and attn_dim must be positive".into());
        }
        if self.base_width == 0 || self.base_width % NORM_GROUPS != 0 {
            bad.push(format!(
                "base_width must be a positive multiple of {NORM_GROUPS}, got {}",
                self.base_width
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::shape(bad.join("; ")))
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (1..=self.depth).map(|j| self.base_width * j).collect()
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Spatial sizes that carry self-attention, finest first.
    pub fn attention_resolutions(&self) -> Vec<(usize, usize)> {
        [self.depth - 1, self.depth]
            .iter()
            .map(|&k| (self.h >> k, self.w >> k))
            .collect()
    }

    pub fn pos_features(&self) -> usize {
        if self.positional {
            2 * (self.w / 2).clamp(1, MAX_POS_FREQS) + 2 * (self.h / 2).clamp(1, MAX_POS_FREQS)
        } else {
            0
        }
    }

    pub fn cross_attention(&self) -> CrossAttention {
        CrossAttention {
            name: "xattn".into(),
            channels: self.channels,
            cond_dim: self.cond_dim,
            dim: self.attn_dim,
            pos_dim: self.pos_features(),
        }
    }

    fn unet_in(&self) -> usize {
        match self.fusion {
            Fusion::Residual => self.channels,
            Fusion::Concat => 2 * self.channels,
        }
    }

    fn blocks(&self) -> UNetBlocks {
        let widths = self.widths();
        let t = Some(self.temb_dim());
        let deepest = self.depth - 1;
        let last = widths[deepest];
        let mut down = Vec::new();
        let mut cin = self.base_width;
        for (j, &w) in widths.iter().enumerate() {
            down.push((
                ResBlock::new(format!("down{j}.res0"), cin, w, t),
                ResBlock::new(format!("down{j}.res1"), w, w, t),
                (j == deepest).then(|| SelfAttention::new(format!("down{j}.attn"), w)),
            ));
            cin = w;
        }
        let mid = (
            ResBlock::new("mid.res0", last, last, t),
            SelfAttention::new("mid.attn", last),
            ResBlock::new("mid.res1", last, last, t),
        );
        let mut up = Vec::new();
        let mut cin = last;
        for j in (0..self.depth).rev() {
            let w = widths[j];
            up.push((
                ResBlock::new(format!("up{j}.res0"), cin + w, w, t),
                ResBlock::new(format!("up{j}.res1"), w, w, t),
                (j == deepest).then(|| SelfAttention::new(format!("up{j}.attn"), w)),
            ));
            cin = w;
        }
        UNetBlocks {
            stem: Conv::new("stem", 3, self.unet_in(), self.base_width),
            temb0: Dense::new("temb.0", self.base_width, self.temb_dim()),
            temb1: Dense::new("temb.1", self.temb_dim(), self.temb_dim()),
            down,
            mid,
            up,
            out_norm: GroupNorm::new("out.norm", self.base_width),
            out: Conv::new("out.conv", 1, self.base_width, self.channels),
        }
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new(seed);
        self.cross_attention().init(&mut store)?;
        let b = self.blocks();
        b.stem.init(&mut store)?;
        b.temb0.init(&mut store)?;
        b.temb1.init(&mut store)?;
        for (r0, r1, a) in b.down.iter().chain(&b.up) {
            r0.init(&mut store)?;
            r1.init(&mut store)?;
            if let Some(a) = a {
                a.init(&mut store)?;
            }
        }
        b.mid.0.init(&mut store)?;
        b.mid.1.init(&mut store)?;
        b.mid.2.init(&mut store)?;
        b.out_norm.init(&mut store)?;
        b.out.init(&mut store)?;
        Ok(store)
    }

    /// Latitude/longitude features per pixel, `[H*W, pos_features]`:
    /// `sin, cos(2 pi k w / W)` and `sin, cos(pi l (h + 1/2) / H)`.
    pub fn positional_encoding(&self) -> Vec<f64> {
        let kw = (self.w / 2).clamp(1, MAX_POS_FREQS);
        let kh = (self.h / 2).clamp(1, MAX_POS_FREQS);
        let mut out = Vec::with_capacity(self.h * self.w * self.pos_features());
        for y in 0..self.h {
            for x in 0..self.w {
                for k in 1..=kw {
                    let a = 2.0 * PI * k as f64 * x as f64 / self.w as f64;
                    out.push(a.sin());
                    out.push(a.cos());
                }
                for l in 1..=kh {
                    let a = PI * l as f64 * (y as f64 + 0.5) / self.h as f64;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
        out
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<T>, x: NodeId, steps: &[usize], cond: NodeId) -> Result<usize> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [self.h, self.w, self.channels] {
            return Err(Error::shape(format!(
                "denoiser expects [B, {}, {}, {}], got {xs:?}",
                self.h, self.w, self.channels
            )));
        }
        let b = xs[0];
        if steps.len() != b {
            return Err(Error::shape(format!("{} steps for a batch of {b}", steps.len())));
        }
        if steps.contains(&0) {
            return Err(Error::invalid("diffusion steps are 1-based"));
        }
        let cs = g.shape(cond);
        if cs != [b, self.h * self.w, self.cond_dim] {
            return Err(Error::shape(format!(
                "condition embedding {cs:?}, expected [{b}, {}, {}] (d_z mismatch?)",
                self.h * self.w,
                self.cond_dim
            )));
        }
        Ok(b)
    }

    /// `x_n[B, H, W, C]`, one step per batch element, `cond[B, H*W, d_z]`
    /// to predicted noise `[B, H, W, C]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_n: NodeId,
        steps: &[usize],
        cond: NodeId,
    ) -> Result<NodeId> {
        self.forward_with(g, store, x_n, steps, cond, None)
    }

    /// As [`forward`](Self::forward), optionally replacing the skip tensor of
    /// level `ablate_skip` with zeros.
    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_n: NodeId,
        steps: &[usize],
        cond: NodeId,
        ablate_skip: Option<usize>,
    ) -> Result<NodeId> {
        let b = self.check_inputs(g, x_n, steps, cond)?;
        let (h, w, c) = (self.h, self.w, self.channels);
        let xa = self.cross_attention();
        let x_flat = g.reshape(x_n, &[b, h * w, c])?;
        let pe = if self.positional {
            let one = self.positional_encoding();
            let mut data = Vec::with_capacity(b * one.len());
            for _ in 0..b {
                data.extend(one.iter().map(|&v| T::lit(v)));
            }
            Some(g.constant(Tensor::from_vec(&[b, h * w, self.pos_features()], data)?))
        } else {
            None
        };
        let (mixed, _) = xa.project(g, store, x_flat, cond, pe)?;
        let mixed = g.reshape(mixed, &[b, h, w, c])?;
        let unet_in = match self.fusion {
            Fusion::Residual => g.add(x_n, mixed)?,
            Fusion::Concat => g.concat_channels(x_n, mixed)?,
        };
        self.unet(g, store, unet_in, steps, ablate_skip)
    }

    fn unet<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        steps: &[usize],
        ablate_skip: Option<usize>,
    ) -> Result<NodeId> {
        let blocks = self.blocks();
        let emb = StepEmbedding::new(self.base_width)?.embed_batch::<T>(steps);
        let emb = g.constant(emb);
        let t = blocks.temb0.forward(g, store, emb)?;
        let t = g.swish(t);
        let temb = blocks.temb1.forward(g, store, t)?;

        let mut hcur = blocks.stem.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.depth);
        for (r0, r1, attn) in &blocks.down {
            hcur = r0.forward(g, store, hcur, Some(temb))?;
            hcur = r1.forward(g, store, hcur, Some(temb))?;
            if let Some(a) = attn {
                hcur = a.forward(g, store, hcur)?;
            }
            skips.push(hcur);
            hcur = g.max_pool2(hcur)?;
        }
        hcur = blocks.mid.0.forward(g, store, hcur, Some(temb))?;
        hcur = blocks.mid.1.forward(g, store, hcur)?;
        hcur = blocks.mid.2.forward(g, store, hcur, Some(temb))?;
        for (level, (r0, r1, attn)) in (0..self.depth).rev().zip(&blocks.up) {
            hcur = g.upsample2(hcur)?;
            let mut skip = skips[level];
            if ablate_skip == Some(level) {
                skip = g.constant(Tensor::zeros(g.shape(skip)));
            }
            hcur = g.concat_channels(hcur, skip)?;
            hcur = r0.forward(g, store, hcur, Some(temb))?;
            hcur = r1.forward(g, store, hcur, Some(temb))?;
            if let Some(a) = attn {
                hcur = a.forward(g, store, hcur)?;
            }
        }
        let hcur = blocks.out_norm.forward(g, store, hcur)?;
        let hcur = g.swish(hcur);
        blocks.out.forward(g, store, hcur)
    }

    /// Names of the self-attention blocks the U-Net instantiates.
    pub fn self_attention_blocks(&self) -> Vec<String> {
        let b = self.blocks();
        b.down
            .iter()
            .chain(&b.up)
            .filter_map(|(_, _, a)| a.as_ref().map(|a| a.name.clone()))
            .chain(std::iter::once(b.mid.1.name.clone()))
            .collect()
    }
}

struct UNetBlocks {
    stem: Conv,
    temb0: Dense,
    temb1: Dense,
    down: Vec<(ResBlock, ResBlock, Option<SelfAttention>)>,
    mid: (ResBlock, SelfAttention, ResBlock),
    up: Vec<(ResBlock, ResBlock, Option<SelfAttention>)>,
    out_norm: GroupNorm,
    out: Conv,
}

/// Single-head cross-attention: queries from the noisy sample, keys and
/// values from the condition embedding, output projected back to `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub name: String,
    pub channels: usize,
    pub cond_dim: usize,
    pub dim: usize,
    /// Width of the positional features added to queries and keys; 0 for
    /// none.
    pub pos_dim: usize,
}

impl CrossAttention {
    fn parts(&self) -> (Dense, Dense, Dense, Dense, Option<(Dense, Dense)>) {
        let n = &self.name;
        (
            Dense::new(format!("{n}.wq"), self.channels, self.dim).without_bias(),
            Dense::new(format!("{n}.wk"), self.cond_dim, self.dim).without_bias(),
            Dense::new(format!("{n}.wv"), self.cond_dim, self.dim).without_bias(),
            Dense::new(format!("{n}.wo"), self.dim, self.channels).without_bias(),
            (self.pos_dim > 0).then(|| {
                (
                    Dense::new(format!("{n}.pq"), self.pos_dim, self.dim).without_bias(),
                    Dense::new(format!("{n}.pk"), self.pos_dim, self.dim).without_bias(),
                )
            }),
        )
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (q, k, v, o, pos) = self.parts();
        for d in [&q, &k, &v, &o] {
            d.init(store)?;
        }
        if let Some((pq, pk)) = pos {
            pq.init(store)?;
            pk.init(store)?;
        }
        Ok(())
    }

    /// `W_o softmax(Q K^T / sqrt(d)) V` without the residual, for
    /// `x[B, L, C]` and `z[B, L', d_z]`. Returns the projection and the
    /// attention weights `[B, L, L']`.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        z: NodeId,
        pe: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let zs = g.shape(z);
        if zs.last() != Some(&self.cond_dim) {
            return Err(Error::shape(format!(
                "condition width {:?} does not match d_z = {}",
                zs.last(),
                self.cond_dim
            )));
        }
        let (wq, wk, wv, wo, pos) = self.parts();
        let mut q = wq.forward(g, store, x)?;
        let mut k = wk.forward(g, store, z)?;
        let v = wv.forward(g, store, z)?;
        match (pos, pe) {
            (Some((pq, pk)), Some(pe)) => {
                let a = pq.forward(g, store, pe)?;
                q = g.add(q, a)?;
                let b = pk.forward(g, store, pe)?;
                k = g.add(k, b)?;
            }
            (None, None) => {}
            _ => return Err(Error::shape("positional features given to a block without them, or missing")),
        }
        let (att, weights) = attention(g, q, k, v)?;
        let out = wo.forward(g, store, att)?;
        Ok((out, weights))
    }

    /// `x + W_o softmax(Q K^T / sqrt(d)) V`.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        z: NodeId,
        pe: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let (out, weights) = self.project(g, store, x, z, pe)?;
        Ok((g.add(x, out)?, weights))
    }
}

/// `[B, H*W, d_z]` tensor from a batch of embeddings.
pub fn stack_conditions<T: Scalar>(conds: &[&ConditionEmbedding]) -> Result<Tensor<T>> {
    let first = conds
        .first()
        .ok_or_else(|| Error::invalid("no condition embeddings to stack"))?;
    let mut data = Vec::with_capacity(conds.len() * first.values().len());
    for c in conds {
        if (c.rows(), c.cols()) != (first.rows(), first.cols()) {
            return Err(Error::shape("condition embeddings in a batch differ in shape"));
        }
        data.extend(c.values().iter().map(|&v| T::lit(f64::from(v))));
    }
    Tensor::from_vec(&[conds.len(), first.rows(), first.cols()], data)
}
