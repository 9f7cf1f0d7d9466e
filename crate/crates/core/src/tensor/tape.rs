use super::ops::backward_op;
use super::{forward_op, Op, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-owner record of operations, in creation (hence topological) order.
///
/// Every value lives on the tape; only nodes downstream of a
/// gradient-requiring leaf take part in the backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward_op(&op, &refs)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), requires_grad))
    }

    /// Fills gradient slots with `d output / d node` for every node reached.
    ///
    /// A second call is rejected until [`Tape::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                out.value.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::Backward("output does not depend on any parameter".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = backward_op(op, &inputs, &node.value, &g);
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(ig),
                    }
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmaxRows, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2NormalizeRows, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(Op::SelectRows(idx), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    /// `sum(a * mask)` with a constant mask; the usual way to pick or weight entries.
    pub fn masked_sum(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        let prod = self.mul(a, m)?;
        self.sum(prod)
    }

    /// Weighted sum of scalars, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        Ok(acc)
    }
}
