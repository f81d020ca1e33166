//! Wengert tape for reverse-mode differentiation.
//!
//! The tape owns every tensor produced during a forward pass. Operations
//! append a record; [`Tape::backward`] replays the records in exact reverse
//! execution order, accumulating gradients additively into 64-bit buffers.
//! Nodes whose inputs require no gradient are not recorded at all, so frozen
//! subgraphs never allocate gradient state.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Elem, Tensor, TensorOf};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A recorded primitive with references to its operands.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        out: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Relu {
        x: Var,
        out: Var,
    },
    Gelu {
        x: Var,
        out: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        out: Var,
        eps: f64,
    },
    GlobalAvgPool {
        x: Var,
        out: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Sum {
        x: Var,
        out: Var,
    },
    /// `out = base + alpha ⊙ delta` with `alpha` broadcast over batch and space.
    Modulate {
        base: Var,
        delta: Var,
        alpha: Var,
        out: Var,
    },
}

/// Recording tape, generic over storage precision.
///
/// Production passes use `Tape<f32>` (the default). `Tape<f64>` runs the same
/// graph code with 64-bit activations and is what the finite-difference
/// oracle evaluates.
pub struct Tape<E: Elem = f32> {
    pub(crate) nodes: Vec<TensorOf<E>>,
    pub(crate) requires: Vec<bool>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    /// Exact 64-bit values of scalar outputs (loss, sums), kept alongside the
    /// rounded stored value.
    refined: BTreeMap<usize, f64>,
    pub(crate) ops: Vec<Op>,
    inference: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    /// A recording tape: leaves keep their `requires_grad` flags.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            refined: BTreeMap::new(),
            ops: Vec::new(),
            inference: false,
        }
    }

    /// An inference tape: nothing requires gradients and no ops are recorded.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.inference = true;
        t
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    /// Registers a 32-bit tensor as a leaf, widening to `E`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.convert::<E>(), requires_grad && !self.inference)
    }

    /// Registers a native-precision leaf.
    pub fn leaf_native(&mut self, t: TensorOf<E>, requires_grad: bool) -> Var {
        self.push(t, requires_grad && !self.inference)
    }

    pub(crate) fn push(&mut self, t: TensorOf<E>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(t);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(id)
    }

    pub(crate) fn record(&mut self, op: Op) {
        if !self.inference {
            self.ops.push(op);
        }
    }

    pub(crate) fn set_refined(&mut self, v: Var, value: f64) {
        self.refined.insert(v.0, value);
    }

    pub fn value(&self, v: Var) -> &TensorOf<E> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Exact 64-bit value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        if self.nodes[v.0].numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "scalar() on tensor of shape {:?}",
                self.nodes[v.0].shape()
            )));
        }
        Ok(match self.refined.get(&v.0) {
            Some(&r) => r,
            None => self.nodes[v.0].data()[0].to_f64(),
        })
    }

    /// Accumulated gradient of a node, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient narrowed to `f32` storage.
    pub fn grad_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| g.iter().map(|&x| x as f32).collect())
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Reverse pass from a scalar loss. Fills gradient buffers for every
    /// recorded node that requires a gradient and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.inference {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape {
            nodes,
            requires,
            grads,
            ops,
            ..
        } = self;
        for op in ops.iter().rev() {
            ops::backward_op(nodes, requires, grads, op);
        }
        Ok(())
    }
}

/// Gets (or lazily allocates) the gradient buffer of `v`.
pub(crate) fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; numel])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape: Tape = Tape::inference();
        let x = tape.leaf(&Tensor::filled(vec![4], 1.5), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.num_ops(), 0);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn frozen_leaves_get_no_grad_buffer() {
        let mut tape: Tape = Tape::new();
        let w = tape.leaf(&Tensor::filled(vec![3], 2.0), true);
        let x = tape.leaf(&Tensor::filled(vec![3], 4.0), false);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        // loss = sum(w * x), x constant: grad(w) = x.
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 4.0, 4.0]);
        assert!(tape.grad(x).is_none());
    }
}
