use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, optionally trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F = f32> {
    pub id: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

/// Ordered collection of parameters addressed by stable string ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(id) {
            return Err(Error::Contract(format!("duplicate parameter id `{id}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            id: id.to_string(),
            value,
            grad,
            trainable,
        });
        let pid = self.params.len() - 1;
        self.index.insert(id.to_string(), pid);
        Ok(ParamId(pid))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<F>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Remove a parameter, keeping the relative order of the rest.
    pub fn remove(&mut self, name: &str) -> Option<Parameter<F>> {
        let pos = self.index.remove(name)?;
        let removed = self.params.remove(pos);
        for v in self.index.values_mut() {
            if *v > pos {
                *v -= 1;
            }
        }
        Some(removed)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.by_name_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Total scalar count over the parameters selected by `filter`.
    pub fn scalar_count(&self, filter: impl Fn(&Parameter<F>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| filter(p))
            .map(|p| p.value.len())
            .sum()
    }

    /// Copy of the store in another precision; gradients reset to zero.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.id, p.value.cast(), p.trainable)
                .expect("ids are unique in the source store");
        }
        out
    }

    /// SHA-256 over `(id, shape, little-endian values)` of the selected
    /// parameters, visited in id order.
    pub fn content_hash(&self, filter: impl Fn(&Parameter<F>) -> bool) -> [u8; 32] {
        let mut selected: Vec<&Parameter<F>> = self.params.iter().filter(|p| filter(p)).collect();
        selected.sort_by(|a, b| a.id.cmp(&b.id));
        let mut hasher = Sha256::new();
        for p in selected {
            hasher.update((p.id.len() as u32).to_le_bytes());
            hasher.update(p.id.as_bytes());
            hasher.update((p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            hasher.update(p.value.to_le_bytes());
        }
        hasher.finalize().into()
    }
}
