//! Settings and batching shared by the autoencoder and denoiser loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub seed: u64,
}

impl TrainSettings {
    /// Autoencoder pretraining defaults.
    pub fn autoencoder() -> Self {
        Self {
            epochs: 100,
            batch: 128,
            lr: 1e-4,
            decay_steps: 10_000,
            decay_rate: 0.95,
            seed: 0,
        }
    }

    /// Denoiser training defaults.
    pub fn denoiser() -> Self {
        Self {
            epochs: 800,
            batch: 256,
            lr: 2e-4,
            decay_steps: 10_000,
            decay_rate: 0.95,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.batch == 0 {
            bad.push("batch must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.decay_steps == 0 {
            bad.push("decay_steps must be positive".to_string());
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            bad.push(format!("decay_rate must be positive, got {}", self.decay_rate));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.decay_steps, self.decay_rate)
    }
}

/// Shuffled minibatches of `0..n` for one epoch. A batch larger than `n` is
/// clamped to a single full batch; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, seed_value: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(seed_value, seed::EPOCH, epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch.clamp(1, n.max(1))).map(<[usize]>::to_vec).collect()
}
