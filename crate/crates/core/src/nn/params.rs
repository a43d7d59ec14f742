use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named parameter tensors. A parameter is trainable iff its tensor
/// `requires_grad`; frozen entries are skipped by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tensor });
        Ok(id)
    }

    /// Trainable parameter initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        self.insert(name, t.with_requires_grad(true))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape).with_requires_grad(trainable))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].tensor.set_requires_grad(trainable);
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.set_requires_grad(trainable);
            n += 1;
        }
        n
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Multiplies every parameter value by `factor` (used to build degenerate test models).
    pub fn scale_all(&mut self, factor: f32) {
        for p in &mut self.params {
            for v in p.tensor.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f32 {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f32) {
        for p in &mut self.params {
            p.tensor.scale_grad(factor);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Hash over names, shapes and exact bit patterns of the selected parameters.
    pub fn fingerprint(&self, mut select: impl FnMut(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.by_name.get(&p.name) {
                let src = &other.params[id.0].tensor;
                if src.shape() != p.tensor.shape() {
                    return Err(Error::shape(
                        "copy_matching",
                        format!("`{}`: {:?} vs {:?}", p.name, src.shape(), p.tensor.shape()),
                    ));
                }
                p.tensor.data_mut().copy_from_slice(src.data());
                n += 1;
            }
        }
        Ok(n)
    }
}
