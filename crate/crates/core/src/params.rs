//! Named parameter storage and binding onto a graph.

use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{LmdError, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor from `(name, tensor)` pairs, checking names and shapes.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(LmdError::Config(format!(
                "expected {} parameters, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if name != &self.names[i] {
                return Err(LmdError::Config(format!(
                    "parameter {i}: expected {}, found {name}",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(LmdError::shape("load", self.tensors[i].shape(), t.shape()));
            }
        }
        for (slot, (_, t)) in self.tensors.iter_mut().zip(entries) {
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Puts every parameter on `graph`; frozen parameters become constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A [`ParamStore`] placed on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wraps vars laid out in the store's parameter order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Per-parameter gradients, zero where nothing flowed.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}
