//! Named parameter storage and per-step binding onto a tape.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{IclError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(IclError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| IclError::Config(format!("missing parameter {name}")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        if self.values[id.0].shape() != shape {
            return Err(IclError::Config(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                self.values[id.0].shape()
            )));
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// New store with only the entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            if n.starts_with(prefix) {
                out.add(n, v.clone()).expect("unique names");
            }
        }
        out
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self
                .values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Bindings over caller-created vars, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients, zero where no gradient arrived.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| grads.get_or_zeros(self.var(id), store.get(id)))
            .collect()
    }

    /// Per-parameter gradients; `None` where no gradient path exists.
    pub fn collect_sparse(&self, store: &ParamStore, grads: &Gradients) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| grads.get(self.var(id)).cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn expect_checks_shape() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(s.expect("w", &[2, 3]).is_ok());
        assert!(s.expect("w", &[3, 2]).is_err());
        assert!(s.expect("v", &[1]).is_err());
    }

    #[test]
    fn filter_prefix_keeps_order() {
        let mut s = ParamStore::new();
        for n in ["b.x", "a.y", "b.z"] {
            s.add(n, Tensor::zeros(&[1])).unwrap();
        }
        let f = s.filter_prefix("b.");
        let names: Vec<_> = f.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b.x", "b.z"]);
    }
}
