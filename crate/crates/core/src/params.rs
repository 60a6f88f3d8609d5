//! Named parameter tensors with optimizer groups.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learning-rate group. Entity embeddings stand in for the pretrained
/// encoders and train at the encoder rate; everything else at the other rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| &self.values[id.0])
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect()
    }
}
