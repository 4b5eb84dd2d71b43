//! Named parameter collections.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// Ordered map from dotted parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merge `other` into `self`, overwriting on name collision.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        self.checksum_prefix("")
    }

    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Add every parameter to `g`. Names accepted by `trainable` become
    /// gradient-tracking leaves; the rest are constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let v = if trainable(name) {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Gradients of every tracked parameter that the loss reached.
    pub fn collect_grads<'g>(&'g self, grads: &'g Grads) -> Vec<(&'g str, &'g [f32])> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.as_str(), g)))
            .collect()
    }
}

/// Uniform He-style fan-in initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(rng: &mut SeedRng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound) as f32)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

/// Dense layer `[fan_in, fan_out]` weight plus zero bias under `prefix`.
pub fn init_linear(
    ps: &mut ParamStore,
    rng: &mut SeedRng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    ps.insert(format!("{prefix}.weight"), he_uniform(rng, fan_in, fan_out, gain))?;
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]))
}

/// `x @ W + b` for the layer stored under `prefix`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}
