use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GridField, GridSeries, GridSpec};
use crate::error::{Error, Result};

/// Per-channel min-max statistics from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn fit_norm(train: &GridSeries) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::invalid("cannot fit normalisation on an empty series"));
    }
    let c = train.spec().c();
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for frame in train.frames() {
        for px in frame.values().chunks_exact(c) {
            for ch in 0..c {
                min[ch] = min[ch].min(px[ch]);
                max[ch] = max[ch].max(px[ch]);
            }
        }
    }
    let degenerate = min.iter().zip(&max).map(|(a, b)| a == b).collect();
    Ok(NormStats { min, max, degenerate })
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        if spec.c() != self.channels() {
            return Err(Error::shape(format!(
                "field has {} channels, normalisation stats have {}",
                spec.c(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// `(v - min) / (max - min)`; degenerate channels map to 0.5. Values
    /// outside the training range land outside `[0, 1]`.
    pub fn normalize(&self, x: &GridField) -> Result<GridField> {
        self.check(x.spec())?;
        let c = self.channels();
        let mut out = x.values().to_vec();
        for px in out.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = if self.degenerate[ch] {
                    0.5
                } else {
                    (px[ch] - self.min[ch]) / (self.max[ch] - self.min[ch])
                };
            }
        }
        GridField::new(x.spec().clone(), out)
    }

    /// Inverse of [`normalize`](Self::normalize); degenerate channels return
    /// their constant.
    pub fn denormalize(&self, x: &GridField) -> Result<GridField> {
        self.check(x.spec())?;
        let values = self.denormalize_values(x.values())?;
        GridField::new(x.spec().clone(), values)
    }

    pub fn denormalize_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let c = self.channels();
        if values.len() % c != 0 {
            return Err(Error::shape("value count is not a multiple of channels"));
        }
        let mut out = values.to_vec();
        for px in out.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = if self.degenerate[ch] {
                    self.min[ch]
                } else {
                    self.min[ch] + px[ch] * (self.max[ch] - self.min[ch])
                };
            }
        }
        Ok(out)
    }

    pub fn normalize_series(&self, s: &GridSeries) -> Result<GridSeries> {
        let frames = s
            .frames()
            .iter()
            .map(|f| self.normalize(f))
            .collect::<Result<Vec<_>>>()?;
        GridSeries::new(Arc::clone(s.spec()), frames, s.step_hours())
    }
}
