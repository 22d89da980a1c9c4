use std::collections::{BTreeMap, HashMap};

use super::tensor::{Float, Tensor};
use crate::error::{CitiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Named parameters of a model. Names are unique paths such as `layers.0.attn_q`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CitiError::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable,
        });
        Ok(id)
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Adds `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Float> {
    pub(crate) grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert_or_add(&mut self, id: ParamId, g: Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    /// Fixed-order reduction: iteration is by parameter id.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            self.insert_or_add(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale_in_place(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
