use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from hierarchical names (`det.layer0.q.weight`) to tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Copies every entry of `other` in, overwriting on name clashes.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Lazily binds entries of a [`ParamStore`] into a [`Graph`] as leaves.
pub struct Params<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> Params<'g, 's> {
    /// Binds parameters as differentiable leaves.
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: true,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binds parameters as constants (frozen networks, inference).
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for `name` instead of the stored tensor.
    pub fn bind(&self, name: &str, v: Var<'g>) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    /// Gradients of every parameter touched so far.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| self.graph.grad(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_scan_is_ordered() {
        let mut s = ParamStore::new();
        s.insert("gen.b", Tensor::scalar(1.0));
        s.insert("det.a", Tensor::scalar(2.0));
        s.insert("gen.a", Tensor::scalar(3.0));
        let names: Vec<_> = s.with_prefix("gen.").map(|(k, _)| k.as_str()).collect();
        assert_eq!(names, vec!["gen.a", "gen.b"]);
    }

    #[test]
    fn binding_is_cached_and_missing_names_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(2.0));
        let g = Graph::new();
        let p = Params::new(&g, &s);
        let a = p.get("w").unwrap();
        let b = p.get("w").unwrap();
        assert_eq!(a.id(), b.id());
        assert!(p.get("nope").is_err());
        g.backward(a.square()).unwrap();
        assert_eq!(p.grads()["w"].item(), 4.0);
    }
}
