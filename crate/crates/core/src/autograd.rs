//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is also a topological order. [`Tape::backward`] walks the
//! records in reverse exactly once. Each [`Op`] has a pure forward rule, so a
//! recorded computation can also be re-evaluated with one leaf replaced
//! ([`Tape::replay`]); the finite-difference oracle uses that to avoid
//! recomputing the parts of the graph that do not depend on the perturbed
//! parameter.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::{self, elementwise, layout, linalg, nn};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Gelu,
    Sum,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Per-axis index gather (cyclic shift, narrow, flip).
    Gather(Arc<layout::AxisMaps>),
    Concat { axis: usize },
    Softmax,
    LayerNorm { eps: f64 },
    Conv2d { padding: usize, stride: usize },
    Resize { height: usize, width: usize },
    AvgPool { k: usize },
    IndexSelect(Arc<Vec<usize>>),
    /// Class-balanced binary cross entropy on logits; inputs are
    /// `(logits, mask)`.
    WeightedCe,
}

type InputGrads = Vec<Option<Tensor>>;

impl Op {
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Leaf => Err(Error::State("leaves have no forward rule".into())),
            Op::MatMul { ta, tb } => linalg::matmul(x[0], x[1], *ta, *tb),
            Op::Add => ops::binary(x[0], x[1], |a, b| a + b),
            Op::Sub => ops::binary(x[0], x[1], |a, b| a - b),
            Op::Mul => ops::binary(x[0], x[1], |a, b| a * b),
            Op::Scale(c) => Ok(x[0].scaled(*c)),
            Op::Sigmoid => Ok(x[0].map(ops::sigmoid)),
            Op::Gelu => Ok(x[0].map(ops::gelu)),
            Op::Sum => Ok(Tensor::scalar(x[0].sum())),
            Op::Reshape(shape) => x[0].reshape(shape.clone()),
            Op::Permute(perm) => ops::permute(x[0], perm),
            Op::Gather(maps) => ops::gather_axes(x[0], maps),
            Op::Concat { axis } => ops::concat(x, *axis),
            Op::Softmax => ops::softmax(x[0]),
            Op::LayerNorm { eps } => ops::layer_norm(x[0], x[1], x[2], *eps),
            Op::Conv2d { padding, stride } => ops::conv2d(x[0], x[1], x[2], *padding, *stride),
            Op::Resize { height, width } => ops::bilinear_resize(x[0], *height, *width),
            Op::AvgPool { k } => ops::avg_pool2d(x[0], *k),
            Op::IndexSelect(idx) => ops::index_select(x[0], idx),
            Op::WeightedCe => loss::weighted_ce_forward(x[0], x[1]),
        }
    }

    fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor, need: &[bool]) -> Result<InputGrads> {
        let grads = match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { ta, tb } => {
                let (ga, gb) = linalg::matmul_backward(x[0], x[1], *ta, *tb, g, need[0], need[1])?;
                vec![ga, gb]
            }
            Op::Add | Op::Sub => {
                let ga = need[0].then(|| ops::reduce_to(g, x[0].shape())).transpose()?;
                let gb = if need[1] {
                    let r = ops::reduce_to(g, x[1].shape())?;
                    Some(if matches!(self, Op::Sub) { r.scaled(-1.0) } else { r })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Mul => {
                let ga = need[0]
                    .then(|| ops::reduce_to(&ops::binary(g, x[1], |a, b| a * b)?, x[0].shape()))
                    .transpose()?;
                let gb = need[1]
                    .then(|| ops::reduce_to(&ops::binary(g, x[0], |a, b| a * b)?, x[1].shape()))
                    .transpose()?;
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(g.scaled(*c))],
            Op::Sigmoid => vec![Some(g.zip_map(out, |gi, y| gi * y * (1.0 - y))?)],
            Op::Gelu => vec![Some(g.zip_map(x[0], |gi, xi| gi * elementwise::gelu_grad(xi))?)],
            Op::Sum => vec![Some(Tensor::full(x[0].shape(), g.item()?))],
            Op::Reshape(_) => vec![Some(g.reshape(x[0].shape())?)],
            Op::Permute(perm) => vec![Some(ops::permute(g, &layout::inverse_permutation(perm))?)],
            Op::Gather(maps) => vec![Some(ops::scatter_axes(g, maps, x[0].shape())?)],
            Op::Concat { axis } => {
                let extents: Vec<usize> = x.iter().map(|t| t.shape()[*axis]).collect();
                layout::split(g, *axis, &extents)?.into_iter().map(Some).collect()
            }
            Op::Softmax => vec![Some(nn::softmax_backward(out, g)?)],
            Op::LayerNorm { eps } => {
                let (gx, gg, gb) =
                    nn::layer_norm_backward(x[0], x[1], x[2], *eps, g, [need[0], need[1], need[2]])?;
                vec![gx, gg, gb]
            }
            Op::Conv2d { padding, stride } => {
                let (gx, gw, gb) =
                    nn::conv2d_backward(x[0], x[1], x[2], *padding, *stride, g, [need[0], need[1], need[2]])?;
                vec![gx, gw, gb]
            }
            Op::Resize { .. } => vec![Some(nn::bilinear_resize_backward(x[0].shape(), g)?)],
            Op::AvgPool { k } => vec![Some(nn::avg_pool2d_backward(x[0].shape(), *k, g)?)],
            Op::IndexSelect(idx) => vec![Some(nn::index_select_backward(x[0].shape(), idx, g)?)],
            Op::WeightedCe => vec![Some(loss::weighted_ce_backward(x[0], x[1], g.item()?)?), None],
        };
        Ok(grads)
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// An append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves that require them, keyed by tape position.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence
    /// the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// The forward cone of one leaf, in tape order.
#[derive(Debug, Clone)]
pub struct ReplayPlan {
    leaf: usize,
    output: usize,
    nodes: Vec<usize>,
}

impl ReplayPlan {
    /// Number of recorded operations that must be recomputed.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all records so the tape can be used for a new pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::State("operands recorded on different tapes".into()));
            }
        }
        let (values, requires_grad): (Vec<Tensor>, bool) = {
            let nodes = self.nodes.borrow();
            (
                inputs.iter().map(|v| nodes[v.id].value.clone()).collect(),
                inputs.iter().any(|v| nodes[v.id].requires_grad),
            )
        };
        let refs: Vec<&Tensor> = values.iter().collect();
        let value = op.forward(&refs)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Back-propagates from a scalar `loss`. A tape supports a single
    /// backward pass; call [`Tape::reset`] before recording again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::State("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out.by_id.insert(id, g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &g, &need)?;
            for (&src, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !nodes[src].requires_grad {
                    continue;
                }
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }

    /// Collects the operations between `leaf` and `output` that depend on
    /// `leaf`.
    pub fn replay_plan(&self, leaf: Var<'_>, output: Var<'_>) -> Result<ReplayPlan> {
        let nodes = self.nodes.borrow();
        if !matches!(nodes[leaf.id].op, Op::Leaf) {
            return Err(Error::State("replay target must be a leaf".into()));
        }
        let mut dirty = vec![false; output.id + 1];
        let mut plan = Vec::new();
        if leaf.id <= output.id {
            dirty[leaf.id] = true;
            for id in leaf.id + 1..=output.id {
                if nodes[id].inputs.iter().any(|&i| dirty[i]) {
                    dirty[id] = true;
                    plan.push(id);
                }
            }
        }
        Ok(ReplayPlan {
            leaf: leaf.id,
            output: output.id,
            nodes: plan,
        })
    }

    /// Re-evaluates the recorded computation with the leaf of `plan` set to
    /// `value`, returning the new value of the plan's output.
    pub fn replay(&self, plan: &ReplayPlan, value: &Tensor) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        value.expect_shape(nodes[plan.leaf].value.shape())?;
        let mut fresh: HashMap<usize, Tensor> = HashMap::with_capacity(plan.nodes.len() + 1);
        fresh.insert(plan.leaf, value.clone());
        for &id in &plan.nodes {
            let node = &nodes[id];
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| fresh.get(i).unwrap_or(&nodes[*i].value))
                .collect();
            let v = node.op.forward(&inputs)?;
            fresh.insert(id, v);
        }
        Ok(fresh
            .remove(&plan.output)
            .unwrap_or_else(|| nodes[plan.output].value.clone()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::MatMul { ta: false, tb: false }, &[self, rhs])
    }

    /// `self @ rhs^T` over the last two axes.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::MatMul { ta: false, tb: true }, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Sub, &[self, rhs])
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Mul, &[self, rhs])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.push(Op::Scale(c), &[self])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sigmoid, &[self])
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.tape.push(Op::Gelu, &[self])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sum, &[self])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        self.tape.push(Op::Reshape(shape.into()), &[self])
    }

    pub fn permute(self, perm: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        self.tape.push(Op::Permute(perm.into()), &[self])
    }

    /// Cyclic shift: `out[.., i, ..] = in[.., (i + shift) mod n, ..]` per axis.
    pub fn roll(self, shifts: &[isize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shifts.len() != shape.len() {
            return Err(Error::dim(format!("roll: {} shifts for rank {}", shifts.len(), shape.len())));
        }
        let maps = layout::roll_maps(&shape, shifts);
        self.tape.push(Op::Gather(Arc::new(maps)), &[self])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let maps = layout::narrow_maps(&self.shape(), axis, start, len)?;
        self.tape.push(Op::Gather(Arc::new(maps)), &[self])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        first.tape.push(Op::Concat { axis }, parts)
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.tape.push(Op::Softmax, &[self])
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.push(Op::LayerNorm { eps }, &[self, gamma, beta])
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, padding: usize, stride: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Conv2d { padding, stride }, &[self, weight, bias])
    }

    pub fn resize(self, height: usize, width: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Resize { height, width }, &[self])
    }

    pub fn avg_pool(self, k: usize) -> Result<Var<'t>> {
        self.tape.push(Op::AvgPool { k }, &[self])
    }

    pub fn index_select(self, indices: Arc<Vec<usize>>) -> Result<Var<'t>> {
        self.tape.push(Op::IndexSelect(indices), &[self])
    }

    /// Class-balanced cross entropy of these logits against a binary `mask`.
    pub fn weighted_ce(self, mask: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::WeightedCe, &[self, mask])
    }
}
