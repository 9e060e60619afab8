//! Named, ordered parameter collections and their binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t.with_requires_grad(false));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Adds every tensor as a leaf. `trainable` decides whether gradients
    /// flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound::from_ids(&self.names, ids)
    }

    /// Replaces tensors from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::CheckpointMismatch("parameter names differ".into()));
        }
        for (name, (b, a)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            *b = a.clone();
        }
        Ok(())
    }
}

/// Node ids of a bound [`ParamStore`], addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs already-created nodes with parameter names.
    pub fn from_ids(names: &[String], ids: Vec<NodeId>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Uniform in `±1/√fan_in`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}
