//! SGD with momentum; weight decay is added to the gradient before the
//! velocity update:
//!
//! ```text
//! v <- momentum * v + g + weight_decay * theta
//! theta <- theta - lr * v
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    velocity: BTreeMap<String, Tensor>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (what, v) in [
            ("learning_rate", learning_rate),
            ("momentum", momentum),
            ("weight_decay", weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{what} must be finite and >= 0, got {v}")));
            }
        }
        Ok(OptimState {
            velocity: params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Parameter(format!(
            "optimizer step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let (lr, m, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (name, g) in grads {
        let theta = params.get_mut(name)?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(name.clone()))?;
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::dim(format!(
                "optimizer step for `{name}`: param {:?}, grad {:?}",
                theta.shape(),
                g.shape()
            )));
        }
        let vd = v.data_mut();
        let td = theta.data_mut();
        for ((vi, ti), gi) in vd.iter_mut().zip(td.iter_mut()).zip(g.data()) {
            *vi = m * *vi + gi + wd * *ti;
            *ti -= lr * *vi;
        }
    }
    Ok(())
}
