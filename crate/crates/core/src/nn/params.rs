use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every parameter of a model; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Removes the trailing parameters whose names start with `prefix`.
    /// Ids of the remaining parameters stay valid.
    pub fn pop_prefix(&mut self, prefix: &str) -> usize {
        let mut removed = 0;
        while self.params.last().is_some_and(|p| p.name.starts_with(prefix)) {
            let p = self.params.pop().expect("non-empty");
            self.by_name.remove(&p.name);
            removed += 1;
        }
        removed
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Scalar count, optionally restricted to trainable parameters.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds `scale * grad` for each entry of a gradient set.
    pub fn accumulate(&mut self, grads: &super::Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    /// SHA-256 over names, shapes and value bytes of parameters matching `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces values by name; shapes must match and every parameter must be covered.
    pub fn load_values(&mut self, tensors: Vec<(String, Tensor)>) -> Result<(), NnError> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in tensors {
            let idx = *self
                .by_name
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {name}")))?;
            let p = &mut self.params[idx];
            if p.value.shape() != t.shape() {
                return Err(NnError::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t;
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(NnError::Checkpoint(format!(
                "checkpoint lacks {}",
                self.params[i].name
            )));
        }
        Ok(())
    }

    /// Rounds every value through f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
