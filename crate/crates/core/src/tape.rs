//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in exact reverse
//! order, so a node's gradient is complete before it is propagated. Losses
//! are supplied as gradient seeds on arbitrary nodes, which lets several
//! loss terms (detection head, feature taps) enter at different depths.

use crate::error::{Error, Result};
use crate::ops::{self, BnSaved};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// Recorded with gradients disabled; nothing saved.
    Detached,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Leaky {
        input: Var,
        slope: T,
    },
    MaxPool {
        input: Var,
        indices: Vec<u32>,
    },
    Reorg {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    BnTrain {
        gamma: Var,
        beta: Var,
        input: Var,
        saved: BnSaved<T>,
    },
    BnInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached => "detached",
            Op::Conv { .. } => "conv2d",
            Op::Leaky { .. } => "leaky_relu",
            Op::MaxPool { .. } => "max_pool2",
            Op::Reorg { .. } => "reorg2",
            Op::Concat { .. } => "concat",
            Op::BnTrain { .. } => "batch_norm_train",
            Op::BnInfer { .. } => "batch_norm_infer",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Output of a training-mode batch norm: the normalized node plus the batch
/// statistics, for the caller's running-average update.
pub struct BnOutput<T> {
    pub out: Var,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A tape that computes values only; [`Tape::backward`] will fail.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, self.record)
    }

    /// Constant leaf: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.needs(inputs);
        let op = if rg { op } else { Op::Detached };
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        Ok(self.push_op(out, Op::Conv { input, weight, bias, stride, pad }, &[input, weight, bias]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let out = ops::leaky_relu(self.value(input), slope)?;
        Ok(self.push_op(out, Op::Leaky { input, slope }, &[input]))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (out, indices) = ops::max_pool2_with_indices(self.value(input))?;
        Ok(self.push_op(out, Op::MaxPool { input, indices }, &[input]))
    }

    pub fn reorg2(&mut self, input: Var) -> Result<Var> {
        let out = ops::reorg2(self.value(input))?;
        Ok(self.push_op(out, Op::Reorg { input }, &[input]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).nchw()?.1;
        Ok(self.push_op(out, Op::Concat { a, b, split }, &[a, b]))
    }

    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<BnOutput<T>> {
        let (out, saved) = ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let c = saved.mean.len();
        let mean = Tensor::new(&[c], saved.mean.clone())?;
        let var = Tensor::new(&[c], saved.var.clone())?;
        let out = self.push_op(out, Op::BnTrain { gamma, beta, input, saved }, &[input, gamma, beta]);
        Ok(BnOutput { out, mean, var })
    }

    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let out = ops::batch_norm_infer(self.value(input), mean, var, self.value(gamma), self.value(beta), eps)?;
        let op = Op::BnInfer { input, gamma, beta, mean: mean.clone(), var: var.clone(), eps };
        Ok(self.push_op(out, op, &[input, gamma, beta]))
    }

    /// Propagates the seeded output gradients back to every node.
    ///
    /// Seeds are added to the named nodes before the sweep starts; a node may
    /// be seeded more than once.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Grads<T>> {
        if !self.record {
            return Err(Error::invalid("backward on a tape recorded without gradients"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads[v.0], g)?;
        }
        let mut visited = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else { continue };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            visited.push(Var(idx));
            let g = g.clone();
            match &node.op {
                Op::Leaf | Op::Detached => {}
                Op::Conv { input, weight, bias, stride, pad } => {
                    let need_in = self.nodes[input.0].requires_grad;
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), &g, *stride, *pad, need_in)?;
                    if let Some(di) = cg.input {
                        accumulate(&mut grads[input.0], di)?;
                    }
                    self.accumulate_if(&mut grads, *weight, cg.weight)?;
                    self.accumulate_if(&mut grads, *bias, cg.bias)?;
                }
                Op::Leaky { input, slope } => {
                    let d = ops::leaky_relu_backward(self.value(*input), &g, *slope)?;
                    accumulate(&mut grads[input.0], d)?;
                }
                Op::MaxPool { input, indices } => {
                    let d = ops::max_pool2_backward(self.value(*input).shape(), indices, &g)?;
                    accumulate(&mut grads[input.0], d)?;
                }
                Op::Reorg { input } => {
                    let d = ops::reorg2_inverse(&g)?;
                    accumulate(&mut grads[input.0], d)?;
                }
                Op::Concat { a, b, split } => {
                    let (da, db) = ops::split_channels(&g, *split)?;
                    self.accumulate_if(&mut grads, *a, da)?;
                    self.accumulate_if(&mut grads, *b, db)?;
                }
                Op::BnTrain { gamma, beta, input, saved } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(saved, self.value(*gamma), &g)?;
                    self.accumulate_if(&mut grads, *input, dx)?;
                    self.accumulate_if(&mut grads, *gamma, dg)?;
                    self.accumulate_if(&mut grads, *beta, db)?;
                }
                Op::BnInfer { input, gamma, beta, mean, var, eps } => {
                    let (dx, dg, db) =
                        ops::batch_norm_infer_backward(self.value(*input), mean, var, self.value(*gamma), *eps, &g)?;
                    self.accumulate_if(&mut grads, *input, dx)?;
                    self.accumulate_if(&mut grads, *gamma, dg)?;
                    self.accumulate_if(&mut grads, *beta, db)?;
                }
            }
        }
        Ok(Grads { grads, visited })
    }

    fn accumulate_if(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g)?;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the seeded loss w.r.t. `v`, or `None` if no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Like [`Grads::get`] but yields zeros of `like`'s shape when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Operation nodes in the order the sweep processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visits_in_reverse_execution_order() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.1 - 0.7));
        let w = t.param(Tensor::full(&[2, 1, 3, 3], 0.2));
        let b = t.param(Tensor::zeros(&[2]));
        let c = t.conv2d(x, w, b, 1, 1).unwrap();
        let a = t.leaky_relu(c, 0.1).unwrap();
        let p = t.max_pool2(a).unwrap();
        let r = t.reorg2(a).unwrap();
        let seed_p = Tensor::full(t.value(p).shape(), 1.0);
        let seed_r = Tensor::full(t.value(r).shape(), 1.0);
        let g = t.backward(vec![(p, seed_p), (r, seed_r)]).unwrap();
        assert_eq!(g.visit_order(), &[r, p, a, c]);
        assert_eq!(g.get(w).unwrap().shape(), &[2, 1, 3, 3]);
        assert_eq!(g.get(b).unwrap().shape(), &[2]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.param(Tensor::from_vec(vec![1.0]));
        assert!(t.backward(vec![(x, Tensor::from_vec(vec![1.0]))]).is_err());
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(vec![(x, Tensor::from_vec(vec![1.0]))]).is_err());
    }
}
