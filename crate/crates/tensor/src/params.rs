use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients<T = f32> = BTreeMap<String, Tensor<T>>;

/// Named parameter tensors. Iteration order is the lexical order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles from explicit `(name, var)` pairs, e.g. to drive a model from
    /// graph inputs created elsewhere.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Collects accumulated gradients; parameters the loss never reached get zeros.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>) -> Gradients<T> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
