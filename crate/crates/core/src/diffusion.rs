//! Forward noising, the denoiser training loop and ancestral sampling.
//!
//! Everything here works in normalised space. Steps are 1-based.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{stack_conditions, DenoiserArch, Fusion};
use crate::encoder::{check_against, stack_frames, Autoencoder, AutoencoderArch, ConditionEmbedding};
use crate::error::{Error, Result};
use crate::grid::{GridField, GridSeries, GridSpec, NormStats};
use crate::nn::{Adam, Checkpoint, Graph, ParamStore, Tensor};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::seed;
use crate::train::{epoch_batches, TrainSettings};

const FORMAT: &str = "codicast-model";
const VERSION: u32 = 1;

/// `sqrt(abar_n) x0 + sqrt(1 - abar_n) eps`, elementwise.
pub fn forward_diffuse(x0: &[f64], n: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_step(n)?;
    if x0.len() != eps.len() {
        return Err(Error::shape(format!(
            "noise has {} entries, field has {}",
            eps.len(),
            x0.len()
        )));
    }
    let ab = s.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn forward_diffuse_field(x0: &GridField, n: usize, eps: &[f64], s: &NoiseSchedule) -> Result<GridField> {
    GridField::new(x0.spec().clone(), forward_diffuse(x0.values(), n, eps, s)?)
}

/// Anything that can play the role of the noise-prediction network.
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Condition embedding of two consecutive normalised frames.
    fn condition(&self, prev: &GridField, curr: &GridField) -> Result<ConditionEmbedding>;

    /// Predicted noise for one normalised sample `x_n` (HWC order).
    fn predict_noise(&self, x_n: &[f64], n: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>>;
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `mean (eps - eps_hat(x_n, n, cond))^2` for one example.
pub fn training_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    prev: &GridField,
    curr: &GridField,
    next: &GridField,
    n: usize,
    eps: &[f64],
) -> Result<f64> {
    if !prev.same_layout(curr) || !curr.same_layout(next) {
        return Err(Error::shape("training frames differ in layout"));
    }
    let x_n = forward_diffuse(next.values(), n, eps, model.schedule())?;
    let cond = model.condition(prev, curr)?;
    let pred = model.predict_noise(&x_n, n, &cond)?;
    if pred.len() != eps.len() {
        return Err(Error::shape("prediction and noise sizes differ"));
    }
    Ok(mse(eps, &pred))
}

/// One training example: conditioning frames, target, step and noise.
pub struct Example<'a> {
    pub prev: &'a GridField,
    pub curr: &'a GridField,
    pub next: &'a GridField,
    pub n: usize,
    pub eps: &'a [f64],
}

/// Mean of [`training_loss`] over examples; all examples have equal size,
/// so this is the mean over every entry of the batch.
pub fn batch_training_loss<P: NoisePredictor + ?Sized>(model: &P, batch: &[Example<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for e in batch {
        total += training_loss(model, e.prev, e.curr, e.next, e.n, e.eps)?;
    }
    Ok(total / batch.len() as f64)
}

/// Runs the reverse chain from `x_start` at step `from` down to step 1:
/// `x_{n-1} = (x_n - (1 - a_n) / sqrt(1 - abar_n) eps_hat) / sqrt(a_n) + sigma_n z`
/// with `z = 0` at `n = 1`. When `stochastic` is false every `z` is 0.
pub fn reverse_chain<P: NoisePredictor + ?Sized>(
    model: &P,
    x_start: Vec<f64>,
    from: usize,
    cond: &ConditionEmbedding,
    rng: &mut ChaCha8Rng,
    stochastic: bool,
) -> Result<Vec<f64>> {
    let s = model.schedule();
    s.check_step(from)?;
    let mut x = x_start;
    for n in (1..=from).rev() {
        let eps = model.predict_noise(&x, n, cond)?;
        if eps.len() != x.len() {
            return Err(Error::shape("prediction and sample sizes differ"));
        }
        let a = s.alpha(n);
        let coef = (1.0 - a) / (1.0 - s.alpha_bar(n)).sqrt();
        let inv = 1.0 / a.sqrt();
        let sigma = s.sigma(n);
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
        }
        if stochastic && n > 1 {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
        }
    }
    Ok(x)
}

/// Ancestral sample of the next normalised frame given two normalised
/// frames. `X_N` and every `z` come from one stream seeded by `seed_value`.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    prev: &GridField,
    curr: &GridField,
    seed_value: u64,
) -> Result<GridField> {
    let cond = model.condition(prev, curr)?;
    sample_with_condition(model, curr.spec(), &cond, seed_value)
}

pub fn sample_with_condition<P: NoisePredictor + ?Sized>(
    model: &P,
    spec: &Arc<GridSpec>,
    cond: &ConditionEmbedding,
    seed_value: u64,
) -> Result<GridField> {
    let mut rng = seed::rng(seed_value);
    let x_n: Vec<f64> = (0..spec.frame_len()).map(|_| rng.sample(StandardNormal)).collect();
    let x0 = reverse_chain(model, x_n, model.schedule().steps(), cond, &mut rng, true)?;
    if let Some(i) = x0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    GridField::new(spec.clone(), x0)
}

/// Denoiser hyperparameters that do not follow from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSettings {
    pub base_width: usize,
    /// Cross-attention width `d`.
    pub d: usize,
    #[serde(default = "default_true")]
    pub positional: bool,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
}

fn default_true() -> bool {
    true
}

fn default_fusion() -> Fusion {
    Fusion::Residual
}

impl Default for DenoiserSettings {
    fn default() -> Self {
        Self {
            base_width: 64,
            d: 64,
            positional: true,
            fusion: Fusion::Residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserSettings,
    pub train: TrainSettings,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            denoiser: DenoiserSettings::default(),
            train: TrainSettings::denoiser(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: Arc<Autoencoder>,
    pub arch: DenoiserArch,
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub channel_names: Vec<String>,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

impl TrainedModel {
    /// Builds an untrained model (random denoiser weights).
    pub fn untrained(
        cfg: &DiffusionConfig,
        spec: &GridSpec,
        norm: NormStats,
        encoder: Arc<Autoencoder>,
    ) -> Result<Self> {
        if encoder.arch.channels != spec.c() || norm.channels() != spec.c() {
            return Err(Error::shape(format!(
                "data has {} channels, encoder {}, normalisation {}",
                spec.c(),
                encoder.arch.channels,
                norm.channels()
            )));
        }
        let mut arch = DenoiserArch::new(
            spec.h(),
            spec.w(),
            spec.c(),
            2 * encoder.latent(),
            cfg.denoiser.d,
            cfg.denoiser.base_width,
        )?;
        arch.positional = cfg.denoiser.positional;
        arch.fusion = cfg.denoiser.fusion;
        let params = arch.init::<f32>(cfg.train.seed)?;
        Ok(Self {
            encoder,
            arch,
            params,
            schedule: cfg.schedule.build()?,
            norm,
            channel_names: spec.channel_names().to_vec(),
            seed: cfg.train.seed,
            loss_history: Vec::new(),
        })
    }

    fn check_field(&self, x: &GridField) -> Result<()> {
        if (x.h(), x.w(), x.c()) != (self.arch.h, self.arch.w, self.arch.channels) {
            return Err(Error::shape(format!(
                "field is {}x{}x{}, model expects {}x{}x{}",
                x.h(),
                x.w(),
                x.c(),
                self.arch.h,
                self.arch.w,
                self.arch.channels
            )));
        }
        Ok(())
    }

    fn predict_batch(&self, x_n: Tensor<f32>, steps: &[usize], cond: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.constant(x_n);
        let c = g.constant(cond);
        let out = self.arch.forward(&mut g, &self.params, x, steps, c)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            format: FORMAT.into(),
            version: VERSION,
            schedule: self.schedule.params(),
            norm: self.norm.clone(),
            arch: self.arch.clone(),
            encoder_arch: self.encoder.arch.clone(),
            encoder_seed: self.encoder.params.seed(),
            channel_names: self.channel_names.clone(),
            seed: self.seed,
            loss_history: self.loss_history.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_vec(&meta)?);
        ck.push_store("encoder.", &self.encoder.params);
        ck.push_store("denoiser.", &self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&ck.meta)
            .map_err(|e| Error::Version(format!("not a model checkpoint: {e}")))?;
        if meta.format != FORMAT || meta.version != VERSION {
            return Err(Error::Version(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                meta.format, meta.version
            )));
        }
        meta.arch.validate()?;
        let enc_params = ck.store("encoder.", meta.encoder_seed)?;
        check_against(&meta.encoder_arch.init::<f32>(meta.encoder_seed)?, &enc_params)?;
        let params = ck.store("denoiser.", meta.seed)?;
        check_against(&meta.arch.init::<f32>(meta.seed)?, &params)?;
        if meta.arch.cond_dim != 2 * meta.encoder_arch.latent() || meta.norm.channels() != meta.arch.channels {
            return Err(Error::shape("checkpoint components disagree on dimensions"));
        }
        Ok(Self {
            encoder: Arc::new(Autoencoder {
                arch: meta.encoder_arch,
                params: enc_params,
                norm: Some(meta.norm.clone()),
                channel_names: Some(meta.channel_names.clone()),
            }),
            arch: meta.arch,
            params,
            schedule: meta.schedule.build()?,
            norm: meta.norm,
            channel_names: meta.channel_names,
            seed: meta.seed,
            loss_history: meta.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    format: String,
    version: u32,
    schedule: ScheduleParams,
    norm: NormStats,
    arch: DenoiserArch,
    encoder_arch: AutoencoderArch,
    encoder_seed: u64,
    channel_names: Vec<String>,
    seed: u64,
    loss_history: Vec<f64>,
}

impl NoisePredictor for TrainedModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn condition(&self, prev: &GridField, curr: &GridField) -> Result<ConditionEmbedding> {
        self.check_field(prev)?;
        self.check_field(curr)?;
        self.encoder.encode_condition(prev, curr)
    }

    fn predict_noise(&self, x_n: &[f64], n: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        self.schedule.check_step(n)?;
        let (h, w, c) = (self.arch.h, self.arch.w, self.arch.channels);
        let x = Tensor::from_vec(&[1, h, w, c], x_n.iter().map(|&v| v as f32).collect())?;
        let cond = stack_conditions::<f32>(&[cond])?;
        let out = self.predict_batch(x, &[n], cond)?;
        Ok(out.data().iter().map(|&v| f64::from(v)).collect())
    }
}

/// Trains the denoiser on `(t-1, t) -> t+1` triples of `data` (raw units;
/// normalised with `norm`). Each example gets its own uniform step and
/// Gaussian noise. The encoder stays frozen, so its latent maps are computed
/// once per frame.
pub fn train(
    cfg: &DiffusionConfig,
    data: &GridSeries,
    norm: &NormStats,
    encoder: Arc<Autoencoder>,
) -> Result<TrainedModel> {
    if data.len() < 3 {
        return Err(Error::invalid(format!(
            "training needs at least 3 frames, got {}",
            data.len()
        )));
    }
    cfg.train.validate()?;
    let mut model = TrainedModel::untrained(cfg, data.spec(), norm.clone(), encoder)?;
    let normed = norm.normalize_series(data)?;
    let frames: Vec<&GridField> = normed.frames().iter().collect();

    let latent = model.encoder.latent();
    let mut latents: Vec<Vec<f32>> = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(32) {
        let z = model.encoder.encode_frames(chunk)?;
        latents.extend(z.data().chunks_exact(z.len() / chunk.len()).map(<[f32]>::to_vec));
    }
    let conds: Vec<ConditionEmbedding> = (1..frames.len() - 1)
        .map(|t| ConditionEmbedding::from_latents(&latents[t - 1], &latents[t], latent))
        .collect::<Result<_>>()?;

    let steps_total = model.schedule.steps();
    let ts = cfg.train;
    let mut adam = Adam::new(ts.adam());
    let mut global_step = 0u64;
    let mut history = Vec::with_capacity(ts.epochs);
    for epoch in 0..ts.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(conds.len(), ts.batch, ts.seed, epoch) {
            let mut rng = seed::rng(seed::derive(ts.seed, seed::NOISE, global_step));
            let steps: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=steps_total)).collect();
            let targets: Vec<&GridField> = batch.iter().map(|&i| frames[i + 2]).collect();
            let x0 = stack_frames::<f32>(&targets)?;
            let per = x0.len() / batch.len();
            let mut x_n = Vec::with_capacity(x0.len());
            let mut eps = Vec::with_capacity(x0.len());
            for (b, &n) in steps.iter().enumerate() {
                let ab = model.schedule.alpha_bar(n);
                let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                for &v in &x0.data()[b * per..(b + 1) * per] {
                    let e = rng.sample::<f64, _>(StandardNormal) as f32;
                    eps.push(e);
                    x_n.push(sa * v + sb * e);
                }
            }
            let cond_batch: Vec<&ConditionEmbedding> = batch.iter().map(|&i| &conds[i]).collect();
            let mut g = Graph::new();
            let xn = g.constant(Tensor::from_vec(x0.shape(), x_n)?);
            let target = g.constant(Tensor::from_vec(x0.shape(), eps)?);
            let c = g.constant(stack_conditions::<f32>(&cond_batch)?);
            let pred = model.arch.forward(&mut g, &model.params, xn, &steps, c)?;
            let loss = g.mse(pred, target)?;
            let lv = f64::from(g.value(loss).data()[0]);
            if !lv.is_finite() {
                return Err(Error::NonFinite { index: global_step as usize });
            }
            total += lv * batch.len() as f64;
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.params)?;
            adam.step(&mut model.params);
            global_step += 1;
        }
        history.push(total / conds.len() as f64);
    }
    model.loss_history = history;
    Ok(model)
}
