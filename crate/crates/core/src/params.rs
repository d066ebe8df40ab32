//! Named parameter storage and its registration on a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every learnable tensor of a model, keyed by a dotted hierarchical name
/// (`encoder.stages.0.blocks.1.attn.qkv.weight`). Iteration order is the
/// lexicographic order of the names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces every tensor whose name satisfies `pred` with zeros.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if pred(name) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Records every parameter on `tape` as a gradient-receiving leaf.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Debug)]
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_, 't> {
        Scope {
            vars: self,
            prefix: prefix.into(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient for every parameter, zeros where the loss did not reach it.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// A name prefix into a [`ParamVars`].
#[derive(Debug, Clone)]
pub struct Scope<'a, 't> {
    vars: &'a ParamVars<'t>,
    prefix: String,
}

impl<'a, 't> Scope<'a, 't> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a, 't> {
        Scope {
            vars: self.vars,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(&join(&self.prefix, name))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

fn join(prefix: &str, name: impl std::fmt::Display) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer.
///
/// Weights are drawn from `uniform(-s, s)` with `s = sqrt(1 / fan_in)`;
/// biases, position-bias tables and norm shifts start at zero, norm scales at
/// one.
#[derive(Debug)]
pub struct Initializer {
    params: ModelParams,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            params: ModelParams::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let s = (1.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-s..s))
    }

    /// `prefix.weight: [inp, out]` and, optionally, `prefix.bias: [out]`.
    pub fn linear(&mut self, prefix: &str, inp: usize, out: usize, bias: bool) {
        let w = self.uniform(vec![inp, out], inp);
        self.params.insert(join(prefix, "weight"), w);
        if bias {
            self.params.insert(join(prefix, "bias"), Tensor::zeros([out]));
        }
    }

    /// `prefix.weight: [out, inp, k, k]` and `prefix.bias: [out]`.
    pub fn conv(&mut self, prefix: &str, inp: usize, out: usize, k: usize) {
        let w = self.uniform(vec![out, inp, k, k], inp * k * k);
        self.params.insert(join(prefix, "weight"), w);
        self.params.insert(join(prefix, "bias"), Tensor::zeros([out]));
    }

    pub fn norm(&mut self, prefix: &str, channels: usize) {
        self.params.insert(join(prefix, "weight"), Tensor::ones([channels]));
        self.params.insert(join(prefix, "bias"), Tensor::zeros([channels]));
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.params.insert(name, Tensor::zeros(shape));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_errors_name_the_parameter() {
        let p = ModelParams::new();
        match p.get("missing.weight") {
            Err(Error::Lookup(name)) => assert_eq!(name, "missing.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn initializer_is_seeded_and_bounded() {
        let build = |seed| {
            let mut init = Initializer::new(seed);
            init.linear("fc", 16, 4, true);
            init.conv("conv", 2, 3, 3);
            init.finish()
        };
        let (a, b) = (build(5), build(5));
        assert_eq!(a, b);
        assert_ne!(a, build(6));
        assert!(a.get("fc.weight").unwrap().max_abs() <= 0.25);
        assert!(a.get("conv.weight").unwrap().max_abs() <= (1.0f64 / 18.0).sqrt());
        assert_eq!(a.get("fc.bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn scopes_join_names() {
        let mut p = ModelParams::new();
        p.insert("enc.block.w", Tensor::zeros([1]));
        let tape = Tape::new();
        let vars = p.register(&tape);
        assert!(vars.scope("enc").sub("block").var("w").is_ok());
        assert!(vars.scope("enc").var("w").is_err());
    }
}
