use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Sinusoidal embedding of an integer diffusion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEmbedding {
    dim: usize,
    max_period: f64,
}

impl StepEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_period(dim, 10_000.0)
    }

    pub fn with_period(dim: usize, max_period: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "step embedding dim must be even and positive, got {dim}"
            )));
        }
        if max_period <= 1.0 {
            return Err(Error::invalid("max_period must exceed 1"));
        }
        Ok(Self { dim, max_period })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[sin(n f_0) .. sin(n f_{h-1}), cos(n f_0) .. cos(n f_{h-1})]` with
    /// `f_i = max_period^(-i/h)` and `h = dim/2`.
    pub fn embed(&self, step: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let n = step as f64;
        let mut out = vec![0.0; self.dim];
        for i in 0..half {
            let freq = (-(self.max_period.ln()) * i as f64 / half as f64).exp();
            out[i] = (n * freq).sin();
            out[half + i] = (n * freq).cos();
        }
        out
    }

    pub fn embed_batch<T: Scalar>(&self, steps: &[usize]) -> Tensor<T> {
        let data = steps
            .iter()
            .flat_map(|&s| self.embed(s))
            .map(T::lit)
            .collect();
        Tensor::from_vec(&[steps.len(), self.dim], data).expect("embedding batch shape")
    }
}
