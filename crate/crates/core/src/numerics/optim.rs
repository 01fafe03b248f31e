use std::collections::BTreeMap;

use super::{GradientRecord, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Classical momentum SGD: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, params: &ParameterSet) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        let velocity = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// One update. Parameters absent from `grads` are treated as having a zero
    /// gradient, so their velocity still decays.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientRecord) -> Result<()> {
        if let Some(name) = grads.0.keys().find(|n| params.get(n).is_none()) {
            return Err(Error::Structure(format!(
                "gradient for unknown parameter {name}"
            )));
        }
        for (name, theta) in params.iter_mut() {
            let v = self
                .velocity
                .get_mut(name)
                .ok_or_else(|| Error::Structure(format!("optimizer has no state for {name}")))?;
            if v.shape() != theta.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    &[v.shape(), theta.shape()],
                ));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != theta.shape() {
                    return Err(Error::shape(
                        "sgd_momentum_step",
                        &[g.shape(), theta.shape()],
                    ));
                }
            }
            for (i, vi) in v.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *vi = self.momentum * *vi + gi;
            }
            theta.axpy(-self.learning_rate, v)?;
        }
        Ok(())
    }
}
