use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::backend::{BnBatchStats, Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters and non-trainable buffers of one model.
///
/// Names are hierarchical (`stage2.block0.conv1.weight`) and kept in sorted
/// order, so iteration, serialization and checksums are stable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn remove_param(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn remove_buffer(&mut self, name: &str) -> Option<Tensor<T>> {
        self.buffers.remove(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over every name, shape and little-endian payload, params then
    /// buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (section, map) in [("params", &self.params), ("buffers", &self.buffers)] {
            h.update(section.as_bytes());
            for (name, t) in map {
                h.update((name.len() as u64).to_le_bytes());
                h.update(name.as_bytes());
                h.update((t.ndim() as u64).to_le_bytes());
                for &d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                h.update(t.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every parameter on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Binding<'a, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars, store: self }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BnBatchStats<T>)], momentum: f64) -> Result<()> {
        for (name, s) in stats {
            let mut rm = self
                .buffers
                .remove(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::Contract(format!("missing running stats for {name}")))?;
            let rv = self.buffer_mut(&format!("{name}.running_var"))?;
            s.apply(&mut rm, rv, momentum);
            self.buffers.insert(format!("{name}.running_mean"), rm);
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] placed on a particular tape.
pub struct Binding<'a, T> {
    vars: BTreeMap<String, Var>,
    store: &'a ParamStore<T>,
}

impl<T: Element> Binding<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.buffer(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
