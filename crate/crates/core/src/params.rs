use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::tensor::Tensor;

/// What a parameter is, which decides its treatment by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Ssm,
    /// Constrained Bayar kernels: projected back onto the constraint after every step.
    Bayar,
}

/// Named learnable tensors of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, self.names[i].as_str(), t))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Leaf for parameter `id` in `g`.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, &self.tensors[id])
    }

    /// Replaces the value of a named tensor, keeping its shape.
    pub fn load(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if t.shape() != self.tensors[id].shape() {
            return Err(Error::dim("load", self.tensors[id].shape(), t.shape()));
        }
        self.tensors[id] = t;
        Ok(())
    }
}
