//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so reverse index order is a valid topological order
//! for the backward sweep and each node's backward rule runs exactly once.

mod backward;
mod ops;
mod spatial;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with batch statistics and schedule a running-stat update.
    Train,
    /// Normalise with running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, sizes: Vec<usize> },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, outer: usize, channels: usize, inner: usize, train: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    GridSample { img: Var, coords: Var },
    GradScale(Var, T),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MaxAbsNormalize { x: Var, denom: Vec<T>, argmax: Vec<Option<usize>> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Recorded computation for one forward/backward pass.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    macs: u64,
    pending_buffers: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0, pending_buffers: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// Multiply-accumulate operations executed by matrix products and
    /// convolutions since construction or the last [`Graph::reset_macs`].
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Read a parameter from `store`. Buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), Op::Param(id), true)
        } else {
            self.push(p.value.clone(), Op::Input, false)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn schedule_buffer(&mut self, id: ParamId, value: Tensor<T>) {
        self.pending_buffers.push((id, value));
    }

    /// Running-statistic updates produced by training-mode batch norms.
    /// Apply them to the store once the step is accepted.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.pending_buffers)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !(shape.is_empty() || shape.iter().product::<usize>() == 1) {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { leaves: HashMap::new(), params: HashMap::new() };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                    }
                },
                op => backward::propagate(self, Var(idx), op, &g, &mut grads),
            }
        }
        Ok(out)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a [`Graph::leaf`]; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Euclidean norm over the gradients of `ids`.
    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.params.get(id))
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}
