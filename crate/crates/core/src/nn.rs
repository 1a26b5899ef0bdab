//! Named parameter storage shared by the segmenter and the box regressor.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param { name: name.into(), value });
        self.params.len() - 1
    }

    /// He-uniform tensor: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn push_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape, data).expect("shape and data agree"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.len()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every tensor to `g` as a leaf, in order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Gradients of `leaves` after a backward pass; unreached leaves get zeros.
    pub fn grads(&self, g: &mut Graph, leaves: &[NodeId]) -> Vec<Vec<f64>> {
        leaves
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| g.take_grad(id).unwrap_or_else(|| alloc::vec![0.0; p.value.len()]))
            .collect()
    }

    pub fn data_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.value.data_mut()).collect()
    }

    /// Replaces every tensor; names and shapes must match exactly.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            bail!(Shape, "expected {} tensors, got {}", self.params.len(), named.len());
        }
        for (p, (name, t)) in self.params.iter().zip(named) {
            if &p.name != name || p.value.shape() != t.shape() {
                bail!(Shape, "tensor {} {:?} does not match {} {:?}", name, t.shape(), p.name, p.value.shape());
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(named) {
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}
