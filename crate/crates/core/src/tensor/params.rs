use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered collection of uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: BTreeMap<String, usize>,
}

/// Parameter names mapped to their leaves on one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    by_name: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        match self.by_name.get(name) {
            Some(&id) => id,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// One gradient array per parameter, aligned with [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet<S>(pub Vec<Vec<S>>);

impl<S: Scalar> GradSet<S> {
    pub fn arrays(&self) -> &[Vec<S>] {
        &self.0
    }

    pub fn arrays_mut(&mut self) -> &mut [Vec<S>] {
        &mut self.0
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Replaces an existing parameter, which may change its shape.
    pub fn replace(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `graph`; trainable leaves when `trainable`,
    /// constants otherwise.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> Bound {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut by_name = BTreeMap::new();
        for (name, t) in &self.entries {
            let mut t = t.clone();
            t.requires_grad = trainable;
            let id = graph.leaf(t);
            ids.push(id);
            by_name.insert(name.clone(), id);
        }
        Bound { ids, by_name }
    }

    /// Gathers gradients for every bound parameter, zero where unreached.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<S>) -> GradSet<S> {
        GradSet(
            self.entries
                .iter()
                .zip(&bound.ids)
                .map(|((_, t), &id)| match grads.get(id) {
                    Some(g) => g.to_vec(),
                    None => vec![S::zero(); t.len()],
                })
                .collect(),
        )
    }

    /// Copies a gradient set into each tensor's `grad` field.
    pub fn set_grads(&mut self, grads: &GradSet<S>) {
        for ((_, t), g) in self.entries.iter_mut().zip(&grads.0) {
            t.grad = Some(g.clone());
        }
    }

    /// SHA-256 over names, shapes and values widened to f64.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            hash_header(&mut h, name, t.shape());
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over names and shapes only.
    pub fn structural_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            hash_header(&mut h, name, t.shape());
        }
        hex(&h.finalize())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn hash_header(h: &mut Sha256, name: &str, shape: &[usize]) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((shape.len() as u64).to_le_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
