//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node in a Wengert list;
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! into the leaves that were registered with `requires_grad`. One training
//! step builds and consumes one tape; tapes are not shared across threads.

mod elementwise;
mod fused;
mod reduce;
mod spatial;

pub use fused::{batch_channel_moments, NormBatchStats, NormStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct NormSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub scale: Vec<f64>,
    pub batch: bool,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// `s - x`
    ScalarSub(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum { x: Var, axes: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    Broadcast { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    SoftmaxChannels { x: Var },
    EntropyChannels { p: Var },
    ChannelNorm { x: Var, gamma: Var, beta: Var, saved: Box<NormSaved> },
    MaskedCe { p: Var, target: Tensor, mask: Tensor, mask_sum: f64, clamp_lo: f64 },
    MaskedMean { x: Var, mask: Tensor, mask_sum: f64 },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires: bool,
    pub op: Op,
}

/// Recording tape for one forward/backward pass.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: false }
    }

    /// Checked math mode: log/div domain violations become errors instead of
    /// non-finite values. Used by tests; off in the training hot loop.
    pub fn new_checked() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros if it is disconnected from the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// repeated calls; intermediate gradients are freed as they are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        if !self.nodes[loss.0].requires {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        let seed = Tensor::new(self.nodes[loss.0].value.shape(), vec![1.0])?;
        accumulate(&mut self.nodes[loss.0].grad, seed);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            if self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaf gradients persist
            }
            let grad = self.nodes[id].grad.take().expect("checked above");
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            step_backward(before, node, &grad)?;
        }
        Ok(())
    }
}

/// Adds `delta` into a gradient slot, allocating it on first use.
pub(crate) fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

/// Accumulates into a parent (which always precedes the node on the tape),
/// skipping parents that do not require gradients.
pub(crate) fn accum_parent(before: &mut [Node], parent: Var, delta: Tensor) {
    let n = &mut before[parent.0];
    if !n.requires {
        return;
    }
    debug_assert_eq!(n.value.shape(), delta.shape());
    accumulate(&mut n.grad, delta);
}

fn step_backward(before: &mut [Node], node: &Node, g: &Tensor) -> Result<()> {
    match &node.op {
        Op::Leaf => unreachable!("leaves are skipped"),
        Op::Add(a, b) => elementwise::backward_add(before, *a, *b, g),
        Op::Sub(a, b) => elementwise::backward_sub(before, *a, *b, g),
        Op::Mul(a, b) => elementwise::backward_mul(before, *a, *b, g),
        Op::Div(a, b) => elementwise::backward_div(before, *a, *b, g),
        Op::AddScalar(a) => accum_parent(before, *a, g.clone()),
        Op::MulScalar(a, s) => accum_parent(before, *a, g.scale(*s)),
        Op::ScalarSub(a) => accum_parent(before, *a, g.scale(-1.0)),
        Op::Exp(a) => elementwise::backward_exp(before, *a, &node.value, g),
        Op::Log(a) => elementwise::backward_log(before, *a, g),
        Op::Abs(a) => elementwise::backward_abs(before, *a, g),
        Op::Relu(a) => elementwise::backward_relu(before, *a, g),
        Op::LeakyRelu(a, slope) => elementwise::backward_leaky_relu(before, *a, *slope, g),
        Op::Sigmoid(a) => elementwise::backward_sigmoid(before, *a, &node.value, g),
        Op::Clamp(a, lo, hi) => elementwise::backward_clamp(before, *a, *lo, *hi, g),
        Op::Sum { x, axes } => reduce::backward_sum(before, *x, axes, g, false),
        Op::Mean { x, axes } => reduce::backward_sum(before, *x, axes, g, true),
        Op::Broadcast { x } => reduce::backward_broadcast(before, *x, g),
        Op::Reshape { x } => reduce::backward_reshape(before, *x, g),
        Op::Concat { parts, axis } => reduce::backward_concat(before, parts, *axis, g),
        Op::Narrow { x, axis, start } => reduce::backward_narrow(before, *x, *axis, *start, g),
        Op::Conv2d { x, w, b, stride, pad } => {
            spatial::backward_conv2d(before, *x, *w, *b, *stride, *pad, g)
        }
        Op::MaxPool2 { x, argmax } => spatial::backward_maxpool2(before, *x, argmax, g),
        Op::AvgPool2 { x } => spatial::backward_avgpool2(before, *x, g),
        Op::Upsample2 { x } => spatial::backward_upsample2(before, *x, g),
        Op::SoftmaxChannels { x } => fused::backward_softmax_channels(before, *x, &node.value, g),
        Op::EntropyChannels { p } => fused::backward_entropy_channels(before, *p, g),
        Op::ChannelNorm { x, gamma, beta, saved } => {
            fused::backward_channel_norm(before, *x, *gamma, *beta, saved, g)
        }
        Op::MaskedCe { p, target, mask, mask_sum, clamp_lo } => {
            fused::backward_masked_ce(before, *p, target, mask, *mask_sum, *clamp_lo, g)
        }
        Op::MaskedMean { x, mask, mask_sum } => {
            fused::backward_masked_mean(before, *x, mask, *mask_sum, g)
        }
    }
    Ok(())
}
