//! Named parameter storage shared by every model in the pipeline.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model.
///
/// Trainable parameters receive gradients; non-trainable entries are buffers
/// such as batch-norm running statistics. Both are checkpointed.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, trainable });
        Ok(id)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    /// Kaiming-uniform initialisation with ReLU gain: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::rand_uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Order-sensitive digest of every value under `prefix`, used to prove
    /// that a training step left a parameter group untouched.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            for v in p.value.data() {
                h ^= v.f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}
