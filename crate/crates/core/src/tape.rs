//! Reverse-mode differentiation on an explicit tape.
//!
//! The tape records whole-grid operations (not per-cell nodes) in
//! topological order during the forward pass; one backward sweep fills a
//! gradient slot for every node reachable from the loss. Stochastic masks
//! are saved on their node at record time, so the backward pass gates step
//! gradients exactly as the forward residual was gated, and a replay with
//! the same inputs and masks is bit-identical.
//!
//! Tapes are single-owner: one tape per sample forward. Parameters enter as
//! leaf nodes, so their gradients come out of the same sweep.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A value flowing through the tape.
#[derive(Debug, Clone)]
pub enum Value<F> {
    Grid(Grid<F>),
    Vector(Vec<F>),
    Scalar(F),
}

impl<F: Real> Value<F> {
    fn zeros_like(&self) -> Value<F> {
        match self {
            Value::Grid(g) => Value::Grid(Grid::zeros(g.height(), g.width(), g.channels())),
            Value::Vector(v) => Value::Vector(vec![F::zero(); v.len()]),
            Value::Scalar(_) => Value::Scalar(F::zero()),
        }
    }

    pub fn as_grid(&self) -> &Grid<F> {
        match self {
            Value::Grid(g) => g,
            _ => panic!("value is not a grid"),
        }
    }

    pub fn as_vector(&self) -> &[F] {
        match self {
            Value::Vector(v) => v,
            _ => panic!("value is not a vector"),
        }
    }

    pub fn as_scalar(&self) -> F {
        match self {
            Value::Scalar(s) => *s,
            _ => panic!("value is not a scalar"),
        }
    }

    fn as_grid_mut(&mut self) -> &mut Grid<F> {
        match self {
            Value::Grid(g) => g,
            _ => panic!("value is not a grid"),
        }
    }

    fn as_vector_mut(&mut self) -> &mut Vec<F> {
        match self {
            Value::Vector(v) => v,
            _ => panic!("value is not a vector"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    DepthwiseConv { input: NodeId, kernel: NodeId },
    Concat { parts: Vec<NodeId> },
    CellLinear { input: NodeId, weight: NodeId, bias: NodeId },
    ReluGrid { input: NodeId },
    ReluVec { input: NodeId },
    MaskedResidual { state: NodeId, update: NodeId, mask: Vec<u8> },
    ChannelMax { input: NodeId, pos: Vec<(usize, usize)> },
    VecLinear { input: NodeId, weight: NodeId, bias: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, label: usize, probs: Vec<F> },
    SigmoidBce { logits: NodeId, label: usize, probs: Vec<F> },
    SumSquares { input: NodeId },
}

struct Node<F> {
    op: Op<F>,
    value: Value<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Value<F>>>,
    ran_backward: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Value<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf_grid(&mut self, g: Grid<F>) -> NodeId {
        self.push(Op::Leaf, Value::Grid(g))
    }

    pub fn leaf_vec(&mut self, v: Vec<F>) -> NodeId {
        self.push(Op::Leaf, Value::Vector(v))
    }

    pub fn value(&self, id: NodeId) -> &Value<F> {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss with respect to a node; `None` until
    /// [`Tape::backward`] has run, or if the node is unreachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Value<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn depthwise_conv(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let out = ops::depthwise_conv3x3(
            self.value(input).as_grid(),
            self.value(kernel).as_vector(),
        )?;
        Ok(self.push(Op::DepthwiseConv { input, kernel }, Value::Grid(out)))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let grids: Vec<&Grid<F>> = parts.iter().map(|&p| self.value(p).as_grid()).collect();
        let out = ops::concat_channels(&grids)?;
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, Value::Grid(out)))
    }

    pub fn cell_linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out_ch = self.value(bias).as_vector().len();
        let out = ops::cell_linear(
            self.value(input).as_grid(),
            self.value(weight).as_vector(),
            self.value(bias).as_vector(),
            out_ch,
        )?;
        Ok(self.push(Op::CellLinear { input, weight, bias }, Value::Grid(out)))
    }

    pub fn relu_grid(&mut self, input: NodeId) -> NodeId {
        let g = self.value(input).as_grid();
        let out = Grid::from_vec(g.height(), g.width(), g.channels(), ops::relu(g.as_slice()));
        self.push(Op::ReluGrid { input }, Value::Grid(out))
    }

    pub fn relu_vec(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input).as_vector());
        self.push(Op::ReluVec { input }, Value::Vector(out))
    }

    pub fn masked_residual(&mut self, state: NodeId, update: NodeId, mask: Vec<u8>) -> NodeId {
        let out = ops::masked_residual(
            self.value(state).as_grid(),
            self.value(update).as_grid(),
            &mask,
        );
        self.push(Op::MaskedResidual { state, update, mask }, Value::Grid(out))
    }

    pub fn channel_max(&mut self, input: NodeId) -> NodeId {
        let (v, pos) = ops::channel_max(self.value(input).as_grid());
        self.push(Op::ChannelMax { input, pos }, Value::Vector(v))
    }

    /// Argmax positions saved by a [`Tape::channel_max`] node.
    pub fn channel_max_positions(&self, id: NodeId) -> &[(usize, usize)] {
        match &self.nodes[id.0].op {
            Op::ChannelMax { pos, .. } => pos,
            _ => panic!("node is not a channel_max"),
        }
    }

    pub fn vec_linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::vec_linear(
            self.value(input).as_vector(),
            self.value(weight).as_vector(),
            self.value(bias).as_vector(),
        )?;
        Ok(self.push(Op::VecLinear { input, weight, bias }, Value::Vector(out)))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).as_vector();
        if label >= z.len() {
            return Err(Error::LabelOutOfRange { label, num_classes: z.len() });
        }
        let probs = ops::softmax(z);
        let loss = -probs[label].ln();
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, label, probs }, Value::Scalar(loss)))
    }

    /// Per-class binary cross-entropy against a one-hot target, summed over
    /// classes. Alternative loss matching the sigmoid output head.
    pub fn sigmoid_bce(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).as_vector();
        if label >= z.len() {
            return Err(Error::LabelOutOfRange { label, num_classes: z.len() });
        }
        let probs: Vec<F> = z.iter().map(|&v| ops::sigmoid(v)).collect();
        let mut loss = F::zero();
        for (c, &z_c) in z.iter().enumerate() {
            // -log sigma(z) = softplus(-z); -log(1 - sigma(z)) = softplus(z)
            let t = if c == label { -z_c } else { z_c };
            loss = loss + softplus(t);
        }
        Ok(self.push(Op::SigmoidBce { logits, label, probs }, Value::Scalar(loss)))
    }

    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let s: F = self.value(input).as_vector().iter().map(|&v| v * v).sum();
        self.push(Op::SumSquares { input }, Value::Scalar(s))
    }

    /// Propagates a unit gradient from `loss` back to every reachable node.
    /// Gradients accumulate directly into per-node slots; no temporaries.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        if !matches!(self.nodes[loss.0].value, Value::Scalar(_)) {
            return Err(Error::NonScalarLoss);
        }
        let Tape { nodes, grads, ran_backward } = self;
        let ensure = |grads: &mut Vec<Option<Value<F>>>, nodes: &Vec<Node<F>>, id: NodeId| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(nodes[id.0].value.zeros_like());
            }
        };
        grads[loss.0] = Some(Value::Scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[idx] = Some(grad);
                    continue;
                }
                Op::DepthwiseConv { input, kernel } => {
                    let dy = grad.as_grid();
                    ensure(grads, nodes, *input);
                    ops::conv3x3_backward_input(
                        nodes[kernel.0].value.as_vector(),
                        dy,
                        grads[input.0].as_mut().unwrap().as_grid_mut(),
                    );
                    ensure(grads, nodes, *kernel);
                    ops::conv3x3_backward_kernel(
                        nodes[input.0].value.as_grid(),
                        dy,
                        grads[kernel.0].as_mut().unwrap().as_vector_mut(),
                    );
                }
                Op::Concat { parts } => {
                    let dy = grad.as_grid();
                    let total = dy.channels();
                    let mut off = 0;
                    for &p in parts {
                        ensure(grads, nodes, p);
                        let pg = grads[p.0].as_mut().unwrap().as_grid_mut();
                        let pc = pg.channels();
                        for (dst, src) in pg
                            .as_mut_slice()
                            .chunks_exact_mut(pc)
                            .zip(dy.as_slice().chunks_exact(total))
                        {
                            for c in 0..pc {
                                dst[c] = dst[c] + src[off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::CellLinear { input, weight, bias } => {
                    let dy = grad.as_grid();
                    ensure(grads, nodes, *input);
                    ops::cell_linear_backward_input(
                        nodes[weight.0].value.as_vector(),
                        dy,
                        grads[input.0].as_mut().unwrap().as_grid_mut(),
                    );
                    ensure(grads, nodes, *weight);
                    ops::cell_linear_backward_weight(
                        nodes[input.0].value.as_grid(),
                        dy,
                        grads[weight.0].as_mut().unwrap().as_vector_mut(),
                    );
                    ensure(grads, nodes, *bias);
                    ops::cell_linear_backward_bias(
                        dy,
                        grads[bias.0].as_mut().unwrap().as_vector_mut(),
                    );
                }
                Op::ReluGrid { input } => {
                    ensure(grads, nodes, *input);
                    let dx = grads[input.0].as_mut().unwrap().as_grid_mut();
                    ops::relu_backward(
                        nodes[input.0].value.as_grid().as_slice(),
                        grad.as_grid().as_slice(),
                        dx.as_mut_slice(),
                    );
                }
                Op::ReluVec { input } => {
                    ensure(grads, nodes, *input);
                    ops::relu_backward(
                        nodes[input.0].value.as_vector(),
                        grad.as_vector(),
                        grads[input.0].as_mut().unwrap().as_vector_mut(),
                    );
                }
                Op::MaskedResidual { state, update, mask } => {
                    let dy = grad.as_grid();
                    let n = dy.channels();
                    ensure(grads, nodes, *state);
                    {
                        let ds = grads[state.0].as_mut().unwrap().as_grid_mut();
                        for (a, &b) in ds.as_mut_slice().iter_mut().zip(dy.as_slice()) {
                            *a = *a + b;
                        }
                    }
                    ensure(grads, nodes, *update);
                    let du = grads[update.0].as_mut().unwrap().as_grid_mut();
                    for (cell_idx, &bit) in mask.iter().enumerate() {
                        if bit != 0 {
                            let (i, j) = (cell_idx / dy.width(), cell_idx % dy.width());
                            let g = dy.cell(i, j);
                            let d = du.cell_mut(i, j);
                            for c in 0..n {
                                d[c] = d[c] + g[c];
                            }
                        }
                    }
                }
                Op::ChannelMax { input, pos } => {
                    ensure(grads, nodes, *input);
                    ops::channel_max_backward(
                        grad.as_vector(),
                        pos,
                        grads[input.0].as_mut().unwrap().as_grid_mut(),
                    );
                }
                Op::VecLinear { input, weight, bias } => {
                    let dy = grad.as_vector();
                    ensure(grads, nodes, *input);
                    ops::vec_linear_backward_input(
                        nodes[weight.0].value.as_vector(),
                        dy,
                        grads[input.0].as_mut().unwrap().as_vector_mut(),
                    );
                    ensure(grads, nodes, *weight);
                    ops::vec_linear_backward_weight(
                        nodes[input.0].value.as_vector(),
                        dy,
                        grads[weight.0].as_mut().unwrap().as_vector_mut(),
                    );
                    ensure(grads, nodes, *bias);
                    ops::vec_linear_backward_bias(
                        dy,
                        grads[bias.0].as_mut().unwrap().as_vector_mut(),
                    );
                }
                Op::SoftmaxCrossEntropy { logits, label, probs }
                | Op::SigmoidBce { logits, label, probs } => {
                    let g = grad.as_scalar();
                    ensure(grads, nodes, *logits);
                    let dz = grads[logits.0].as_mut().unwrap().as_vector_mut();
                    for (c, (d, &p)) in dz.iter_mut().zip(probs).enumerate() {
                        let y = if c == *label { F::one() } else { F::zero() };
                        *d = *d + (p - y) * g;
                    }
                }
                Op::SumSquares { input } => {
                    let g = grad.as_scalar();
                    let two = F::from_f64_c(2.0);
                    ensure(grads, nodes, *input);
                    let dx = grads[input.0].as_mut().unwrap().as_vector_mut();
                    for (d, &v) in dx.iter_mut().zip(nodes[input.0].value.as_vector()) {
                        *d = *d + two * v * g;
                    }
                }
            }
        }
        *ran_backward = true;
        Ok(())
    }

    pub fn ran_backward(&self) -> bool {
        self.ran_backward
    }
}

fn softplus<F: Real>(x: F) -> F {
    // log(1 + e^x), stable for large |x|
    if x > F::zero() {
        x + (F::one() + (-x).exp()).ln()
    } else {
        (F::one() + x.exp()).ln()
    }
}
