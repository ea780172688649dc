//! Autoregressive rollouts and seeded ensembles.
//!
//! A rollout from `(x_{t-1}, x_t)` conditions step 1 on the two given
//! frames, step 2 on `x_t` and the first prediction, and every later step on
//! the two most recent predictions. Predictions are fed back in normalised
//! space without clipping.
//!
//! Member `i` of an ensemble with base seed `s` rolls out with seed
//! `derive(s, MEMBER, i)`, and step `k` (1-based) of a rollout with seed `r`
//! samples with `derive(r, STEP, k)`, so a member's trajectory does not
//! depend on which thread ran it or in what order.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoisePredictor};
use crate::error::{Error, Result};
use crate::grid::{save_series, GridField, GridSeries, NormStats};
use crate::seed;

pub const THREADS_ENV: &str = "CODICAST_THREADS";

pub fn step_seed(rollout_seed: u64, step: usize) -> u64 {
    seed::derive(rollout_seed, seed::STEP, step as u64)
}

pub fn member_seed(base_seed: u64, member: usize) -> u64 {
    seed::derive(base_seed, seed::MEMBER, member as u64)
}

/// `T` denormalised frames following `x_t`. Inputs are in raw units.
pub fn rollout<P: NoisePredictor + ?Sized>(
    model: &P,
    norm: &NormStats,
    x_tm1: &GridField,
    x_t: &GridField,
    steps: usize,
    seed_value: u64,
) -> Result<Vec<GridField>> {
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if !x_tm1.same_layout(x_t) {
        return Err(Error::shape("initial frames differ in layout"));
    }
    let mut prev = norm.normalize(x_tm1)?;
    let mut curr = norm.normalize(x_t)?;
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        let next = sample(model, &prev, &curr, step_seed(seed_value, k))?;
        out.push(norm.denormalize(&next)?);
        prev = std::mem::replace(&mut curr, next);
    }
    Ok(out)
}

/// Where ensemble members run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    /// A dedicated pool with this many workers.
    Parallel(usize),
}

impl Execution {
    /// Reads the worker cap from `CODICAST_THREADS`: `0` means serial, unset
    /// means one worker per available core.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => Self::from_threads(v.trim().parse().map_err(|_| {
                Error::Config(vec![format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")])
            })?),
            Err(_) => Ok(Execution::Parallel(
                std::thread::available_parallelism().map_or(1, |n| n.get()),
            )),
        }
    }

    pub fn from_threads(n: usize) -> Result<Self> {
        Ok(if n == 0 {
            Execution::Serial
        } else {
            Execution::Parallel(n)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    /// `members[i][k]` is lead `k + 1` of member `i`.
    pub members: Vec<Vec<GridField>>,
    pub member_seeds: Vec<u64>,
    pub lead_hours: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn ensemble_forecast<P: NoisePredictor + ?Sized>(
    model: &P,
    norm: &NormStats,
    x_tm1: &GridField,
    x_t: &GridField,
    steps: usize,
    members: usize,
    base_seed: u64,
    step_hours: f64,
    exec: Execution,
) -> Result<ForecastEnsemble> {
    if members == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let member_seeds: Vec<u64> = (0..members).map(|i| member_seed(base_seed, i)).collect();
    let run = |s: &u64| rollout(model, norm, x_tm1, x_t, steps, *s);
    let trajectories: Vec<Vec<GridField>> = match exec {
        Execution::Serial => member_seeds.iter().map(run).collect::<Result<_>>()?,
        Execution::Parallel(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| member_seeds.par_iter().map(run).collect::<Result<_>>())?
        }
    };
    Ok(ForecastEnsemble {
        members: trajectories,
        member_seeds,
        lead_hours: (1..=steps).map(|k| k as f64 * step_hours).collect(),
    })
}

/// Mean and population standard deviation over members at one lead time.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyField {
    pub mean: GridField,
    pub std: GridField,
}

impl UncertaintyField {
    pub fn from_members(fields: &[&GridField]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::invalid("no members"))?;
        let n = fields.len() as f64;
        let len = first.values().len();
        let mut mean = vec![0.0; len];
        for f in fields {
            if !f.same_layout(first) {
                return Err(Error::shape("members differ in layout"));
            }
            for (m, v) in mean.iter_mut().zip(f.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; len];
        for f in fields {
            for ((s, v), m) in var.iter_mut().zip(f.values()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self {
            mean: GridField::new(first.spec().clone(), mean)?,
            std: GridField::new(first.spec().clone(), std)?,
        })
    }

    /// Per channel, the fraction of grid points with
    /// `|truth - mean| <= k * std`.
    pub fn coverage(&self, truth: &GridField, k: f64) -> Result<Vec<f64>> {
        if !truth.same_layout(&self.mean) {
            return Err(Error::shape("truth does not match the ensemble layout"));
        }
        let c = truth.c();
        let mut hits = vec![0usize; c];
        for (i, ((t, m), s)) in truth
            .values()
            .iter()
            .zip(self.mean.values())
            .zip(self.std.values())
            .enumerate()
        {
            if (t - m).abs() <= k * s {
                hits[i % c] += 1;
            }
        }
        let per = (truth.values().len() / c) as f64;
        Ok(hits.into_iter().map(|h| h as f64 / per).collect())
    }

    /// Mean of the std field over all grid points, per channel.
    pub fn mean_spread(&self) -> Vec<f64> {
        let c = self.std.c();
        let mut acc = vec![0.0; c];
        for (i, s) in self.std.values().iter().enumerate() {
            acc[i % c] += s;
        }
        let per = (self.std.values().len() / c) as f64;
        acc.into_iter().map(|a| a / per).collect()
    }
}

impl ForecastEnsemble {
    pub fn steps(&self) -> usize {
        self.lead_hours.len()
    }

    pub fn uncertainty(&self) -> Result<Vec<UncertaintyField>> {
        (0..self.steps())
            .map(|k| {
                let at: Vec<&GridField> = self.members.iter().map(|m| &m[k]).collect();
                UncertaintyField::from_members(&at)
            })
            .collect()
    }

    /// Coverage per lead time and channel against a true trajectory.
    pub fn coverage(&self, truth: &[GridField], k: f64) -> Result<Vec<Vec<f64>>> {
        if truth.len() != self.steps() {
            return Err(Error::shape(format!(
                "{} true frames for {} lead times",
                truth.len(),
                self.steps()
            )));
        }
        self.uncertainty()?
            .iter()
            .zip(truth)
            .map(|(u, t)| u.coverage(t, k))
            .collect()
    }

    /// Writes `member_<i>.gwf`, `mean.gwf`, `std.gwf` and `manifest.json`
    /// into `dir`.
    pub fn export(&self, dir: &Path, base_seed: u64) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let step_hours = self
            .lead_hours
            .first()
            .copied()
            .ok_or_else(|| Error::invalid("empty ensemble"))?;
        let spec = self.members[0][0].spec().clone();
        let mut member_files = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}.gwf");
            save_series(&dir.join(&name), &GridSeries::new(spec.clone(), m.clone(), step_hours)?)?;
            member_files.push(name);
        }
        let unc = self.uncertainty()?;
        let means = unc.iter().map(|u| u.mean.clone()).collect();
        let stds = unc.iter().map(|u| u.std.clone()).collect();
        save_series(&dir.join("mean.gwf"), &GridSeries::new(spec.clone(), means, step_hours)?)?;
        save_series(&dir.join("std.gwf"), &GridSeries::new(spec, stds, step_hours)?)?;
        let manifest = Manifest {
            base_seed,
            members: self.members.len(),
            steps: self.steps(),
            member_seeds: self.member_seeds.clone(),
            lead_hours: self.lead_hours.clone(),
            member_files,
            mean_file: "mean.gwf".into(),
            std_file: "std.gwf".into(),
        };
        let path: PathBuf = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_seed: u64,
    pub members: usize,
    pub steps: usize,
    pub member_seeds: Vec<u64>,
    pub lead_hours: Vec<f64>,
    pub member_files: Vec<String>,
    pub mean_file: String,
    pub std_file: String,
}
