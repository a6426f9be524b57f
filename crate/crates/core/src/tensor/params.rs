use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    tensor: Tensor<T>,
    frozen: bool,
    decay: bool,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. `decay` marks it as subject to weight decay.
    pub fn register(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            frozen: false,
            decay,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.tensor(id))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::TensorShape {
                name: p.name.clone(),
                found: tensor.shape().to_vec(),
                expected: p.tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Freezes every parameter for which `pred(name)` holds and unfreezes the rest.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = pred(&p.name);
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Same names and flags, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names, shapes and values of the parameters selected by `pred`.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter gradients produced by one reverse pass.
///
/// Frozen parameters still receive gradients; they are flagged so the
/// optimizer can skip them.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
    frozen: BTreeMap<ParamId, bool>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn insert(&mut self, id: ParamId, g: Tensor<T>, frozen: bool) {
        self.grads.insert(id, g);
        self.frozen.insert(id, frozen);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.get(&id).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` (used when joining per-item tapes).
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in other.iter() {
            let frozen = other.is_frozen(id);
            match self.grads.get(&id) {
                None => self.insert(id, g.clone(), frozen),
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::shape("accumulate", mine.shape(), g.shape()));
                    }
                    let data = mine
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &b)| a + b)
                        .collect();
                    let t = Tensor::new(mine.shape(), data)?;
                    self.insert(id, t, frozen);
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .filter(|(id, _)| !self.is_frozen(**id))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::of(factor);
        for g in self.grads.values_mut() {
            *g = g.map(|v| v * f);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.register("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        let id = s.register("w", Tensor::zeros(&[2, 2]), true).unwrap();
        let err = s.set(id, Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn digest_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let id = s.register("w", Tensor::zeros(&[2]), true).unwrap();
        let before = s.digest();
        s.set(id, Tensor::full(&[2], 1.0)).unwrap();
        assert_ne!(before, s.digest());
    }
}
