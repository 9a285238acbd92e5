use std::collections::{BTreeMap, HashMap};

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors split into a trainable and a frozen partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub trainable: BTreeMap<String, Tensor>,
    pub frozen: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.trainable.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.frozen.insert(name.into(), tensor.with_requires_grad(false));
    }

    pub fn extend_trainable(&mut self, items: impl IntoIterator<Item = (String, Tensor)>) {
        for (name, t) in items {
            self.insert_trainable(name, t);
        }
    }

    pub fn extend_frozen(&mut self, items: impl IntoIterator<Item = (String, Tensor)>) {
        for (name, t) in items {
            self.insert_frozen(name, t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.trainable.get(name).or_else(|| self.frozen.get(name))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains_key(name)
    }

    /// Names present in both partitions. Empty for a well-formed store.
    pub fn overlapping_names(&self) -> Vec<&str> {
        self.trainable
            .keys()
            .filter(|k| self.frozen.contains_key(*k))
            .map(String::as_str)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.values().map(Tensor::numel).sum()
    }
}

/// Binds named parameters onto one graph, creating each leaf at most once.
pub struct Binder<'p> {
    store: &'p ParamStore,
    vars: HashMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Replaces the leaf for `name` with an existing node, e.g. a perturbed copy
    /// under gradient checking.
    pub fn bind_override(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = if let Some(t) = self.store.trainable.get(name) {
            g.leaf(t)
        } else if let Some(t) = self.store.frozen.get(name) {
            g.constant(t)
        } else {
            return Err(Error::NameMismatch(format!("unknown parameter `{name}`")));
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> Result<&'p Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| Error::NameMismatch(format!("unknown parameter `{name}`")))
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if !self.store.is_trainable(name) {
                continue;
            }
            if let Some(g) = grads.wrt(v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}
