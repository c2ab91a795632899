//! Named parameter store and graph binding.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};
use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Named parameter tensors, name -> f32 tensor, insertion-ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParameters {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn scalar_count(&self, prefix: Option<&str>) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| prefix.is_none_or(|p| n.starts_with(p)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn merge(&mut self, other: ModelParameters) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform draw: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Parameter nodes inside one graph, keyed by parameter name.
pub struct ParamBinding {
    ids: IndexMap<String, NodeId>,
}

impl ParamBinding {
    /// Insert every parameter as a leaf. `requires_grad` decides per name,
    /// which is how parameter groups are frozen.
    pub fn bind<E: Element>(
        graph: &mut Graph<E>,
        params: &ModelParameters,
        requires_grad: impl Fn(&str) -> bool,
    ) -> Self {
        let mut ids = IndexMap::new();
        for (name, tensor) in params.iter() {
            let id = graph.leaf(tensor.map(|v| E::from_f64(v as f64)), requires_grad(name));
            ids.insert(name.clone(), id);
        }
        ParamBinding { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}
