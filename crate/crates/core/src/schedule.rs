//! Diffusion variance schedules.
//!
//! Steps are 1-based in the public API: `beta(n)` for `n` in `1..=N`.
//! The reverse-step noise scale is `sigma_n = sqrt(beta_n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Quadratic,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Mode::Linear),
            "quadratic" => Ok(Mode::Quadratic),
            other => Err(Error::invalid(format!("unknown schedule mode `{other}`"))),
        }
    }
}

/// What a checkpoint stores; the arrays are rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub n: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mode: Mode,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            n: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            mode: Mode::Linear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.n, self.beta_start, self.beta_end, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn build_schedule(n: usize, beta_start: f64, beta_end: f64, mode: Mode) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let frac = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let beta: Vec<f64> = (0..n)
        .map(|i| {
            let t = frac(i);
            match mode {
                Mode::Linear => {
                    if i == n - 1 {
                        beta_end
                    } else {
                        beta_start + t * (beta_end - beta_start)
                    }
                }
                Mode::Quadratic => {
                    if i == 0 {
                        beta_start
                    } else if i == n - 1 {
                        beta_end
                    } else {
                        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                        let r = a + t * (b - a);
                        r * r
                    }
                }
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            n,
            beta_start,
            beta_end,
            mode,
        },
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// `alpha_bar_N / (1 - alpha_bar_N)`.
pub fn terminal_snr(s: &NoiseSchedule) -> f64 {
    let ab = s.alpha_bar(s.steps());
    ab / (1.0 - ab)
}

impl NoiseSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn mode(&self) -> Mode {
        self.params.mode
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {n} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n - 1]
    }

    pub fn sigma(&self, n: usize) -> f64 {
        self.sigma[n - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}
