use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::{Array, Gradients, Graph, Scalar, Var};

/// Named parameter arrays. Iteration order is the lexicographic name order,
/// which fixes the byte layout of serialized parameter sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, Rc<Array<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.entries.insert(name.into(), Rc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.get(name).map(|v| v.as_ref())
    }

    pub(crate) fn get_rc(&self, name: &str) -> Option<Rc<Array<T>>> {
        self.entries.get(name).cloned()
    }

    /// Mutable access; copies the array first if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.entries.get_mut(name).map(Rc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Rc::clone(v)))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Insert every entry of `other`, replacing existing names.
    pub fn extend(&mut self, other: &ParamSet<T>) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), Rc::clone(v));
        }
    }
}

/// Lazily places parameters on a graph. Names matching a frozen prefix are
/// bound as constants and never receive gradients.
pub struct Binder<'g, 'p, T: Scalar> {
    graph: &'g Graph<T>,
    params: &'p ParamSet<T>,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var<'g, T>>>,
}

impl<'g, 'p, T: Scalar> Binder<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, params: &'p ParamSet<T>) -> Self {
        Self {
            graph,
            params,
            frozen: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn with_frozen<S: Into<String>>(mut self, prefixes: impl IntoIterator<Item = S>) -> Self {
        self.frozen.extend(prefixes.into_iter().map(Into::into));
        self
    }

    /// Freeze every parameter.
    pub fn inference(graph: &'g Graph<T>, params: &'p ParamSet<T>) -> Self {
        Self::new(graph, params).with_frozen([""])
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Variable for parameter `name`.
    ///
    /// Panics when the parameter set has no such entry; parameter names are
    /// fixed by the network definitions.
    pub fn get(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get_rc(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let var = self.graph.leaf(value, !self.is_frozen(name));
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients of every bound, trainable parameter.
    pub fn collect(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Array<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
            .collect()
    }
}
