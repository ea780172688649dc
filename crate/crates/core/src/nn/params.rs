use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal (cut at two sigma) with variance `1 / fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named learnable tensors with gradient slots.
///
/// Names are kept in lexical order. Each tensor draws its initial values from
/// a stream keyed by `(seed, name)`, so the registration order of parameters
/// does not affect their values.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    seed: u64,
    params: BTreeMap<String, Param<T>>,
}

// Std-dev of a unit normal truncated at +-2.
const TRUNC_STD: f64 = 0.879_625_66;

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::FanIn(fan_in) => {
                let std = (1.0 / fan_in.max(1) as f64).sqrt() / TRUNC_STD;
                let mut rng = seed::rng(seed::derive(
                    self.seed,
                    seed::PARAM,
                    seed::fnv1a(name.as_bytes()),
                ));
                (0..numel)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break T::lit(z * std);
                        }
                    })
                    .collect()
            }
        };
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    /// Inserts a tensor with an explicit value (checkpoint loading, tests).
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter is {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every parameter whose name starts with `prefix` into a new store,
    /// stripping the prefix.
    pub fn extract_prefixed(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new(self.seed);
        for (name, p) in &self.params {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, p.value.clone())?;
            }
        }
        Ok(out)
    }

    /// Bit-level checksum over names, shapes and values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in &self.params {
            feed(name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}
