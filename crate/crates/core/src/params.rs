//! Named parameter collections.
//!
//! Names follow `module.stage.layer.kind`, e.g. `unet.enc1.conv.weight`.
//! Ordering is lexicographic, which makes iteration, hashing and checkpoint
//! layout canonical.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Add `t` into the entry `name`, creating it when absent.
    pub fn accumulate(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(acc) => acc
                .add_assign(t)
                .map_err(|_| shape_err!("gradient for `{name}`: {:?} vs {:?}", acc.shape(), t.shape())),
            None => {
                self.tensors.insert(name.to_string(), t.clone());
                Ok(())
            }
        }
    }

    /// Merge every tensor of `other` into `self` by accumulation.
    pub fn accumulate_all(&mut self, other: &ParamSet<S>) -> Result<()> {
        for (k, v) in other.iter() {
            self.accumulate(k, v)?;
        }
        Ok(())
    }

    /// Copy entries of `other` into `self`, replacing existing ones.
    pub fn extend_from(&mut self, other: &ParamSet<S>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.to_string(), v.clone());
        }
    }

    /// Sub-collection of names that start with any of `prefixes`.
    pub fn filter_prefixes(&self, prefixes: &[&str]) -> ParamSet<S> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| has_prefix(k, prefixes))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes and little-endian f32 payloads of the tensors matching `prefixes`.
    pub fn digest(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| has_prefix(k, prefixes)) {
            h.update((k.len() as u32).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &x in v.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_only_selected_prefixes() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a.x", Tensor::full(&[2], 1.0));
        p.insert("b.x", Tensor::full(&[2], 1.0));
        let before = p.digest(&["a."]);
        p.get_mut("b.x").unwrap().data_mut()[0] = 3.0;
        assert_eq!(before, p.digest(&["a."]));
        p.get_mut("a.x").unwrap().data_mut()[0] = 3.0;
        assert_ne!(before, p.digest(&["a."]));
    }

    #[test]
    fn accumulate_creates_then_adds() {
        let mut g = ParamSet::<f64>::new();
        g.accumulate("w", &Tensor::full(&[3], 1.0)).unwrap();
        g.accumulate("w", &Tensor::full(&[3], 2.0)).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[3.0, 3.0, 3.0]);
        assert!(g.accumulate("w", &Tensor::full(&[2], 1.0)).is_err());
    }
}
