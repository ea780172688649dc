//! Convolutional autoencoder and the frozen condition encoder built from its
//! first half.
//!
//! Every layer is a stride-1 2x2 convolution with same padding, so the
//! latent map keeps the input's `H x W`. Encoder and decoder layers use ReLU;
//! the decoder's last conv (to `C` channels) is linear.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, NormStats};
use crate::nn::layers::Conv;
use crate::nn::{Adam, Checkpoint, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::train::{epoch_batches, TrainSettings};

pub const KERNEL: usize = 2;
const FORMAT: &str = "codicast-autoencoder";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderArch {
    pub channels: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
}

impl AutoencoderArch {
    /// Widths scaled from the latent size: encoder
    /// `[d/16, d/4, d/2, d]`, decoder `[d, d/2, d/4]`, each at least 8.
    /// `d = 512` gives 32/128/256/512 and 512/256/128.
    pub fn with_latent(channels: usize, latent: usize) -> Result<Self> {
        if channels == 0 || latent == 0 {
            return Err(Error::invalid("autoencoder needs C >= 1 and d_e >= 1"));
        }
        let w = |div: usize| (latent / div).max(8).min(latent);
        Ok(Self {
            channels,
            encoder_widths: vec![w(16), w(4), w(2), latent],
            decoder_widths: vec![latent, w(2), w(4)],
        })
    }

    pub fn latent(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.encoder_widths.is_empty()
            || self.encoder_widths.contains(&0)
            || self.decoder_widths.contains(&0)
        {
            return Err(Error::invalid(format!("invalid autoencoder widths {self:?}")));
        }
        Ok(())
    }

    fn encoder_layers(&self) -> Vec<Conv> {
        let mut cin = self.channels;
        self.encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv::new(format!("enc{i}"), KERNEL, cin, w);
                cin = w;
                conv
            })
            .collect()
    }

    fn decoder_layers(&self) -> Vec<Conv> {
        let mut cin = self.latent();
        let mut layers: Vec<Conv> = self
            .decoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv::new(format!("dec{i}"), KERNEL, cin, w);
                cin = w;
                conv
            })
            .collect();
        layers.push(Conv::new("dec_out", KERNEL, cin, self.channels));
        layers
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new(seed);
        for conv in self.encoder_layers().iter().chain(&self.decoder_layers()) {
            conv.init(&mut store)?;
        }
        Ok(store)
    }

    /// `x[B, H, W, C] -> [B, H, W, d_e]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for conv in self.encoder_layers() {
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// `z[B, H, W, d_e] -> [B, H, W, C]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: NodeId) -> Result<NodeId> {
        let layers = self.decoder_layers();
        let last = layers.len() - 1;
        let mut h = z;
        for (i, conv) in layers.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// `[B, H, W, C]` tensor from frames sharing one layout.
pub fn stack_frames<T: Scalar>(frames: &[&GridField]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("no frames to stack"))?;
    let mut data = Vec::with_capacity(frames.len() * first.values().len());
    for f in frames {
        if !f.same_layout(first) {
            return Err(Error::shape("frames in a batch differ in layout"));
        }
        data.extend(f.values().iter().map(|&v| T::lit(v)));
    }
    Tensor::from_vec(&[frames.len(), first.h(), first.w(), first.c()], data)
}

/// Two per-frame latent maps concatenated on the feature axis, laid out as
/// an `(H*W) x (2*d_e)` row-major matrix: row `p` is
/// `[enc(prev)[p], enc(curr)[p]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ConditionEmbedding {
    pub fn from_latents(prev: &[f32], curr: &[f32], latent: usize) -> Result<Self> {
        if latent == 0 || prev.len() != curr.len() || prev.len() % latent != 0 {
            return Err(Error::shape(format!(
                "latent maps of length {} and {} with d_e={latent}",
                prev.len(),
                curr.len()
            )));
        }
        let rows = prev.len() / latent;
        let mut values = Vec::with_capacity(2 * prev.len());
        for (a, b) in prev.chunks_exact(latent).zip(curr.chunks_exact(latent)) {
            values.extend_from_slice(a);
            values.extend_from_slice(b);
        }
        Ok(Self {
            rows,
            cols: 2 * latent,
            values,
        })
    }

    pub fn from_matrix(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} embedding",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::lit(f64::from(v))).collect();
        Tensor::from_vec(&[self.rows, self.cols], data).expect("embedding shape")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    arch: AutoencoderArch,
    seed: u64,
    #[serde(default)]
    norm: Option<NormStats>,
    #[serde(default)]
    channel_names: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub arch: AutoencoderArch,
    pub params: ParamStore<f32>,
    /// Statistics of the data the model was trained on, when known.
    pub norm: Option<NormStats>,
    pub channel_names: Option<Vec<String>>,
}

impl Autoencoder {
    pub fn new(arch: AutoencoderArch, seed: u64) -> Result<Self> {
        let params = arch.init(seed)?;
        Ok(Self {
            arch,
            params,
            norm: None,
            channel_names: None,
        })
    }

    pub fn latent(&self) -> usize {
        self.arch.latent()
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.arch.channels {
            return Err(Error::shape(format!(
                "frame has {c} channels, encoder expects {}",
                self.arch.channels
            )));
        }
        Ok(())
    }

    /// Latent maps `[B, H, W, d_e]` for a batch of frames.
    pub fn encode_frames(&self, frames: &[&GridField]) -> Result<Tensor<f32>> {
        let x = stack_frames::<f32>(frames)?;
        self.check_channels(x.shape()[3])?;
        let mut g = Graph::inference();
        let x = g.constant(x);
        let z = self.arch.encode(&mut g, &self.params, x)?;
        Ok(g.value(z).clone())
    }

    pub fn reconstruct(&self, frames: &[&GridField]) -> Result<Tensor<f32>> {
        let x = stack_frames::<f32>(frames)?;
        self.check_channels(x.shape()[3])?;
        let mut g = Graph::inference();
        let x = g.constant(x);
        let z = self.arch.encode(&mut g, &self.params, x)?;
        let y = self.arch.decode(&mut g, &self.params, z)?;
        Ok(g.value(y).clone())
    }

    /// Mean squared reconstruction error over all entries of `frames`.
    pub fn reconstruction_mse(&self, frames: &[&GridField]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in frames.chunks(64) {
            let y = self.reconstruct(chunk)?;
            let x = stack_frames::<f32>(chunk)?;
            total += y
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| f64::from(a - b).powi(2))
                .sum::<f64>();
            count += y.len();
        }
        Ok(total / count as f64)
    }

    /// Encodes each frame separately and concatenates the two latent maps
    /// on the feature axis.
    pub fn encode_condition(&self, prev: &GridField, curr: &GridField) -> Result<ConditionEmbedding> {
        if !prev.same_layout(curr) {
            return Err(Error::shape("conditioning frames differ in layout"));
        }
        let z = self.encode_frames(&[prev, curr])?;
        let half = z.len() / 2;
        ConditionEmbedding::from_latents(&z.data()[..half], &z.data()[half..], self.latent())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            format: FORMAT.into(),
            version: VERSION,
            arch: self.arch.clone(),
            seed: self.params.seed(),
            norm: self.norm.clone(),
            channel_names: self.channel_names.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_vec(&meta)?);
        ck.push_store("", &self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(&ck.meta)
            .map_err(|e| Error::Version(format!("not an autoencoder checkpoint: {e}")))?;
        if meta.format != FORMAT || meta.version != VERSION {
            return Err(Error::Version(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                meta.format, meta.version
            )));
        }
        let params = ck.store("", meta.seed)?;
        check_against(&meta.arch.init::<f32>(meta.seed)?, &params)?;
        Ok(Self {
            arch: meta.arch,
            params,
            norm: meta.norm,
            channel_names: meta.channel_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Every tensor the architecture expects is present with the right shape,
/// and nothing else.
pub(crate) fn check_against(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    let mut problems = Vec::new();
    for (name, p) in expected.iter() {
        match found.get(name) {
            Ok(q) if q.value.shape() == p.value.shape() => {}
            Ok(q) => problems.push(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                q.value.shape(),
                p.value.shape()
            )),
            Err(_) => problems.push(format!("tensor `{name}` is missing")),
        }
    }
    for name in found.names() {
        if !expected.contains(name) {
            problems.push(format!("unexpected tensor `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::shape(problems.join("; ")))
    }
}

/// Per-epoch mean training loss, plus the loss of the untrained model over
/// the whole training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_mse: f64,
    pub epoch_loss: Vec<f64>,
}

/// Minimises mean squared reconstruction error on normalised frames with
/// Adam and exponential learning-rate decay.
pub fn pretrain_autoencoder(
    train: &[&GridField],
    arch: AutoencoderArch,
    settings: &TrainSettings,
) -> Result<(Autoencoder, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty series"));
    }
    settings.validate()?;
    let mut model = Autoencoder::new(arch, settings.seed)?;
    model.check_channels(train[0].c())?;
    let initial_mse = model.reconstruction_mse(train)?;
    let mut adam = Adam::new(settings.adam());
    let mut epoch_loss = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(train.len(), settings.batch, settings.seed, epoch) {
            let frames: Vec<&GridField> = batch.iter().map(|&i| train[i]).collect();
            let x = stack_frames::<f32>(&frames)?;
            let mut g = Graph::new();
            let x = g.constant(x);
            let z = model.arch.encode(&mut g, &model.params, x)?;
            let y = model.arch.decode(&mut g, &model.params, z)?;
            let loss = g.mse(y, x)?;
            total += f64::from(g.value(loss).data()[0]) * batch.len() as f64;
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.params)?;
            adam.step(&mut model.params);
        }
        epoch_loss.push(total / train.len() as f64);
    }
    Ok((
        model,
        PretrainReport {
            initial_mse,
            epoch_loss,
        },
    ))
}
