use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor. Frozen parameters never receive gradient and
/// are skipped by every optimizer step.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Vec<f32>>,
    pub frozen: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        Ok(())
    }

    /// Adds a parameter drawn from N(0, std^2).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f32,
        rng: &mut R,
    ) -> Result<()> {
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::Usage(e.to_string()))?;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(rng))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn require(&self, name: &str) -> Result<&Parameter> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.grad = None;
        }
    }

    pub fn unfreeze(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total scalar count.
    pub fn count_total(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Scalar count of non-frozen parameters.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(Parameter::numel)
            .sum()
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.reindex();
    }

    /// Moves all parameters of `other` into this store.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            let frozen = p.frozen;
            let name = p.name.clone();
            self.add(p.name, p.value)?;
            self.get_mut(&name).expect("just added").frozen = frozen;
        }
        Ok(())
    }

    fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Canonical byte form: for each parameter in insertion order, the
    /// name, the shape and the little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of [`ParamStore::to_bytes`].
    pub fn checksum(&self) -> String {
        hex_sha256(&self.to_bytes())
    }

    /// Euclidean norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&g| f64::from(g) * f64::from(g))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
