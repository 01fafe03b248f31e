//! Dense tensors, a reverse-mode tape over a fixed primitive set, and the
//! momentum SGD optimizer.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::SgdMomentum;
pub use tensor::{cosine_similarity, Tensor, LOG_FLOOR};

use crate::error::{Error, Result};

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet(BTreeMap<String, Tensor>);

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Same names and per-name shapes.
    pub fn check_same_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Structure(format!(
                "{} vs {} parameters",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.0.iter().zip(&other.0) {
            if na != nb {
                return Err(Error::Structure(format!("name {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Structure(format!(
                    "{na}: shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds every parameter to `graph` as a trainable leaf.
    pub fn register(&self, graph: &mut Graph) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(name, t.clone())))
            .collect()
    }

    /// Adds every parameter to `graph` as a constant.
    pub fn register_frozen(&self, graph: &mut Graph) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(name, t)| (name.clone(), graph.constant(t.clone())))
            .collect()
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientRecord(pub BTreeMap<String, Tensor>);

impl GradientRecord {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}
