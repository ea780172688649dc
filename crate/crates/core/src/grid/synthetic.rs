//! Desk-scale stand-in for reanalysis data: smooth random fields advected
//! zonally on the periodic longitude axis.
//!
//! Channel `c` moves `speed_c` columns per step. Each step adds a smooth
//! perturbation built only from zonal wavenumbers >= 1, so it has zero mean
//! along every latitude row. Values are rounded to `f32` so series survive a
//! GWF round trip bit-exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GridField, GridSeries, GridSpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub seed: u64,
    /// Perturbation std relative to the unit-std initial field.
    pub perturbation: f64,
    pub step_hours: f64,
}

impl SyntheticConfig {
    pub fn new(h: usize, w: usize, c: usize, t: usize, seed: u64) -> Self {
        Self {
            h,
            w,
            c,
            t,
            seed,
            perturbation: 0.05,
            step_hours: 6.0,
        }
    }

    /// Columns per step for channel `c`.
    pub fn speed(c: usize) -> usize {
        1 + c % 2
    }

    /// Physical offset and scale of channel `c`.
    pub fn channel_affine(c: usize) -> (f64, f64) {
        (10.0 * (c + 1) as f64, 1.0 + c as f64)
    }
}

/// Smooth field: zonal wavenumbers 1..=3 times meridional modes 0..=2,
/// amplitudes falling off with total wavenumber.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for k in 1..=3usize {
        for l in 0..=2usize {
            let amp: f64 = rng.sample::<f64, _>(StandardNormal) / (k + l) as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mphase = rng.gen_range(0.0..PI);
            for y in 0..h {
                let my = (PI * l as f64 * (y as f64 + 0.5) / h as f64 + mphase).cos();
                for x in 0..w {
                    let zx = (2.0 * PI * k as f64 * x as f64 / w as f64 + phase).cos();
                    out[y * w + x] += amp * my * zx;
                }
            }
        }
    }
    out
}

fn unit_std(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let s = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn make_synthetic(h: usize, w: usize, c: usize, t: usize, seed_value: u64) -> Result<GridSeries> {
    generate(&SyntheticConfig::new(h, w, c, t, seed_value))
}

impl SyntheticConfig {
    pub fn generate(&self) -> Result<GridSeries> {
        generate(self)
    }
}

fn generate(cfg: &SyntheticConfig) -> Result<GridSeries> {
    let (h, w, c, t) = (cfg.h, cfg.w, cfg.c, cfg.t);
    if h < 2 || w < 2 || c < 1 || t < 3 {
        return Err(Error::invalid(format!(
            "synthetic series needs H, W >= 2, C >= 1, T >= 3; got {h}x{w}x{c}, T={t}"
        )));
    }
    if !(cfg.perturbation >= 0.0 && cfg.perturbation.is_finite()) {
        return Err(Error::invalid("perturbation amplitude must be finite and >= 0"));
    }
    let names = (0..c).map(|i| format!("var{i}")).collect();
    let spec = Arc::new(GridSpec::equiangular(h, w, names)?);
    let mut rng = seed::rng(seed::derive(cfg.seed, 0x7379_6e74, 0));

    // per-channel anomaly state in unit-std units, [c][h*w]
    let mut state: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut f = smooth_field(&mut rng, h, w);
            unit_std(&mut f);
            f
        })
        .collect();

    let emit = |state: &[Vec<f64>]| -> Result<GridField> {
        let mut values = vec![0.0; h * w * c];
        for (ch, field) in state.iter().enumerate() {
            let (offset, scale) = SyntheticConfig::channel_affine(ch);
            for (i, &a) in field.iter().enumerate() {
                values[i * c + ch] = f64::from((offset + scale * a) as f32);
            }
        }
        GridField::new(spec.clone(), values)
    };

    let mut frames = Vec::with_capacity(t);
    frames.push(emit(&state)?);
    for _ in 1..t {
        for (ch, field) in state.iter_mut().enumerate() {
            let s = SyntheticConfig::speed(ch) % w;
            let mut next = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    next[y * w + (x + s) % w] = field[y * w + x];
                }
            }
            if cfg.perturbation > 0.0 {
                let p = smooth_field(&mut rng, h, w);
                for (n, q) in next.iter_mut().zip(&p) {
                    *n += cfg.perturbation * q;
                }
            }
            *field = next;
        }
        frames.push(emit(&state)?);
    }
    GridSeries::new(spec, frames, cfg.step_hours)
}
