//! Named parameter storage and its binding onto a graph.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Buffers (running statistics) are persisted but never optimized.
    pub trainable: bool,
}

/// Flat map from parameter path (`encoder.stage1.sa.f1.weight`) to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, path: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(TensorError::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path.to_owned(), Param { value, trainable });
        Ok(())
    }

    pub fn insert_trainable(&mut self, path: &str, value: Tensor) -> Result<()> {
        self.insert(path, value, true)
    }

    pub fn insert_buffer(&mut self, path: &str, value: Tensor) -> Result<()> {
        self.insert(path, value, false)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(path.to_owned()))
    }

    pub fn param(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_owned()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "param_set",
                detail: format!("{path}: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(path.to_owned()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Trainable scalar count of every path starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

/// Exposes a [`ParamStore`] to one forward pass.
///
/// Each parameter becomes a single leaf the first time it is requested, so
/// parameters shared between streams accumulate one combined gradient.
pub struct Binder<'a> {
    graph: Graph,
    store: &'a ParamStore,
    train: bool,
    momentum: Option<f64>,
    cache: RefCell<HashMap<String, Var>>,
    buffer_updates: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &Graph, store: &'a ParamStore, train: bool) -> Self {
        Self {
            graph: graph.clone(),
            store,
            train,
            momentum: None,
            cache: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
        }
    }

    /// Replaces every normalization layer's running-statistics momentum
    /// for this pass.
    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = Some(momentum);
        self
    }

    pub fn momentum_override(&self) -> Option<f64> {
        self.momentum
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, path: &str) -> Result<Var> {
        if let Some(v) = self.cache.borrow().get(path) {
            return Ok(v.clone());
        }
        let p = self
            .store
            .param(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_owned()))?;
        let v = if p.trainable {
            self.graph.leaf(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.cache.borrow_mut().insert(path.to_owned(), v.clone());
        Ok(v)
    }

    pub fn buffer(&self, path: &str) -> Result<&'a Tensor> {
        self.store.get(path)
    }

    /// Queues a new value for a buffer, applied by the trainer after the step.
    pub fn update_buffer(&self, path: &str, value: Tensor) {
        self.buffer_updates.borrow_mut().insert(path.to_owned(), value);
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradients of every trainable parameter requested during the pass.
    /// Parameters that did not influence the output receive zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.cache
            .borrow()
            .iter()
            .filter(|(k, _)| self.store.param(k).is_some_and(|p| p.trainable))
            .map(|(k, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
