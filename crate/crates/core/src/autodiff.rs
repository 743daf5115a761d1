//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation method
//! evaluates its kernel eagerly, stores the result and records what is
//! needed to run the adjoint later. Node ids are therefore topologically
//! ordered and [`Graph::backward`] is a single reverse sweep. Gradients that
//! reach a node along several paths are summed.

use alloc::vec;
use alloc::vec::Vec;

use crate::deform;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::loss;
use crate::ops::{self, conv, elementwise, layout, norm, pool, resize};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    DeformConv2d { stride: usize, padding: usize },
    /// Inputs: x, gamma, beta. `batch_moments` marks train mode.
    BatchNorm { mean: Vec<f64>, var: Vec<f64>, batch_moments: bool },
    Relu,
    Sigmoid,
    Add,
    Mul,
    Affine { scale: f64 },
    Concat { split: usize },
    GlobalAvgPool,
    AvgPool2x2,
    Resize,
    Pad,
    Crop { top: usize, left: usize },
    Sum,
    Mean,
    CrossEntropy { labels: Vec<u8>, ignore: u8, count: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    param: bool,
}

/// Recorded computation. Confined to one thread and one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when the node was not reached.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0]))
    }

    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    /// Ids of every parameter leaf, in registration order.
    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].param).map(NodeId).collect()
    }

    /// Multiply-adds of every recorded standard and deformable convolution,
    /// `N·Co·Ho·Wo·Ci·kh·kw` each, with batch folded in.
    pub fn conv_macs(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            let w = match node.op {
                Op::Conv2d { .. } => node.inputs[1],
                Op::DeformConv2d { .. } => node.inputs[2],
                _ => continue,
            };
            let [_, ci, kh, kw] = self.shape(w);
            let per_out = (ci * kh * kw) as u64;
            total += node.value.len() as u64 * per_out;
        }
        total
    }

    /// Which linear piece the recorded computation sits on: the sign of every
    /// ReLU input and the integer cell of every deformable offset.
    pub fn kink_pattern(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu => out.extend(self.value(node.inputs[0]).data().iter().map(|&v| (v > 0.0) as i64)),
                Op::DeformConv2d { .. } => {
                    out.extend(self.value(node.inputs[1]).data().iter().map(|&v| libm::floor(v) as i64))
                }
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("operation output")?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, param: false });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf; gradients flow to it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad: true, param: true });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf (images, fixed tensors); no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad: false, param: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Conv2d { stride, padding }, inputs, out)
    }

    pub fn deform_conv2d(
        &mut self,
        x: NodeId,
        offsets: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = deform::deform_conv2d(
            self.value(x),
            self.value(offsets),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, offsets, w];
        inputs.extend(b);
        self.push(Op::DeformConv2d { stride, padding }, inputs, out)
    }

    /// Train-mode batch norm. Returns the output node and the batch moments,
    /// which the caller folds into its running statistics.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(NodeId, norm::BatchStats)> {
        let xv = self.value(x);
        let count = xv.batch() * xv.height() * xv.width();
        if count == 0 {
            return Err(arg_err!("batch norm over a zero-element channel"));
        }
        let stats = norm::batch_stats(xv);
        let out = norm::normalize(xv, self.value(gamma), self.value(beta), &stats.mean, &stats.var)?;
        let op = Op::BatchNorm { mean: stats.mean.clone(), var: stats.var.clone(), batch_moments: true };
        let id = self.push(op, vec![x, gamma, beta], out)?;
        Ok((id, stats))
    }

    pub fn batch_norm_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, running: &norm::RunningStats) -> Result<NodeId> {
        let c = self.value(x).channels();
        if running.mean.len() != c || running.var.len() != c {
            return Err(shape_err!("running statistics for {} channels, input has {c}", running.mean.len()));
        }
        let out = norm::normalize(self.value(x), self.value(gamma), self.value(beta), &running.mean, &running.var)?;
        let op = Op::BatchNorm { mean: running.mean.clone(), var: running.var.clone(), batch_moments: false };
        self.push(op, vec![x, gamma, beta], out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid, vec![x], out)
    }

    /// `a + b`; `b` may broadcast along any unit extent.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(Op::Add, vec![a, b], out)
    }

    /// `a * b`; `b` may broadcast along any unit extent.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.push(Op::Mul, vec![a, b], out)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let out = ops::affine(self.value(x), scale, shift);
        self.push(Op::Affine { scale }, vec![x], out)
    }

    pub fn pointwise(&mut self, kind: ops::Pointwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let need = || b.ok_or_else(|| shape_err!("{kind:?} needs a second operand"));
        match kind {
            ops::Pointwise::Relu => self.relu(a),
            ops::Pointwise::Sigmoid => self.sigmoid(a),
            ops::Pointwise::Add => self.add(a, need()?),
            ops::Pointwise::Mul => self.mul(a, need()?),
        }
    }

    pub fn channel_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::channel_concat(self.value(a), self.value(b))?;
        let split = self.value(a).channels();
        self.push(Op::Concat { split }, vec![a, b], out)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.push(Op::GlobalAvgPool, vec![x], out)
    }

    pub fn avg_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::avg_pool2x2(self.value(x))?;
        self.push(Op::AvgPool2x2, vec![x], out)
    }

    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let [_, _, h, w] = self.shape(x);
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(Op::Resize, vec![x], out)
    }

    pub fn pad_bottom_right(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let [_, _, ih, iw] = self.shape(x);
        if (ih, iw) == (h, w) {
            return Ok(x);
        }
        let out = ops::pad_bottom_right(self.value(x), h, w)?;
        self.push(Op::Pad, vec![x], out)
    }

    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> Result<NodeId> {
        let [_, _, ih, iw] = self.shape(x);
        if (top, left, ih, iw) == (0, 0, h, w) {
            return Ok(x);
        }
        let out = ops::crop(self.value(x), top, left, h, w)?;
        self.push(Op::Crop { top, left }, vec![x], out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], out)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(arg_err!("mean of an empty tensor"));
        }
        let out = Tensor::scalar(v.mean());
        self.push(Op::Mean, vec![x], out)
    }

    /// Mean softmax cross-entropy over pixels whose label is not `ignore`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8], ignore: u8) -> Result<NodeId> {
        let (value, count) = loss::cross_entropy_forward(self.value(logits), labels, ignore)?;
        let op = Op::CrossEntropy { labels: labels.to_vec(), ignore, count };
        self.push(op, vec![logits], Tensor::scalar(value))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let shapes: Vec<Shape> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g)?;
            for (input, cg) in node.inputs.iter().zip(contributions) {
                let Some(cg) = cg else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&cg)?,
                    None => grads[input.0] = Some(cg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, padding } => {
                let has_bias = node.inputs.len() == 3;
                let gr = conv::conv2d_backward(inp(0), inp(1), has_bias, *stride, *padding, g, self.needs(node.inputs[0]))?;
                let mut v = vec![gr.input, Some(gr.weight)];
                if has_bias {
                    v.push(gr.bias);
                }
                v
            }
            Op::DeformConv2d { stride, padding } => {
                let has_bias = node.inputs.len() == 4;
                let gr = deform::deform_conv2d_backward(
                    inp(0),
                    inp(1),
                    inp(2),
                    has_bias,
                    *stride,
                    *padding,
                    g,
                    self.needs(node.inputs[0]),
                    self.needs(node.inputs[1]),
                )?;
                let mut v = vec![gr.input, gr.offsets, Some(gr.weight)];
                if has_bias {
                    v.push(gr.bias);
                }
                v
            }
            Op::BatchNorm { mean, var, batch_moments } => {
                let gr = norm::batch_norm_backward(inp(0), inp(1), mean, var, *batch_moments, g);
                vec![
                    Some(gr.input),
                    Some(gr.gamma.reshape(inp(1).shape())?),
                    Some(gr.beta.reshape(inp(2).shape())?),
                ]
            }
            Op::Relu => {
                vec![Some(g.zip_map(inp(0), |gv, x| if x > 0.0 { gv } else { 0.0 })?)]
            }
            Op::Sigmoid => {
                vec![Some(g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?)]
            }
            Op::Add => {
                vec![Some(g.clone()), Some(elementwise::reduce_to(g, inp(1).shape()))]
            }
            Op::Mul => {
                let da = self.needs(node.inputs[0]).then(|| elementwise::mul_grad_lhs(inp(1), g));
                let db = self
                    .needs(node.inputs[1])
                    .then(|| elementwise::mul_grad_rhs(inp(0), g, inp(1).shape()));
                vec![da, db]
            }
            Op::Affine { scale } => vec![Some(g.map(|v| v * scale))],
            Op::Concat { split } => {
                let c = g.channels();
                vec![Some(g.slice_channels(0, *split)?), Some(g.slice_channels(*split, c - split)?)]
            }
            Op::GlobalAvgPool => {
                let [_, _, h, w] = inp(0).shape();
                vec![Some(pool::global_avg_pool_backward(g, h, w))]
            }
            Op::AvgPool2x2 => {
                let [_, _, h, w] = inp(0).shape();
                vec![Some(pool::avg_pool2x2_backward(g, h, w))]
            }
            Op::Resize => {
                let [_, _, h, w] = inp(0).shape();
                vec![Some(resize::bilinear_resize_backward(g, h, w))]
            }
            Op::Pad => {
                let [_, _, h, w] = inp(0).shape();
                vec![Some(layout::crop(g, 0, 0, h, w)?)]
            }
            Op::Crop { top, left } => {
                let [_, _, h, w] = inp(0).shape();
                vec![Some(layout::uncrop(g, *top, *left, h, w))]
            }
            Op::Sum => vec![Some(Tensor::full(inp(0).shape(), g.data()[0]))],
            Op::Mean => {
                let x = inp(0);
                vec![Some(Tensor::full(x.shape(), g.data()[0] / x.len() as f64))]
            }
            Op::CrossEntropy { labels, ignore, count } => {
                vec![Some(loss::cross_entropy_backward(inp(0), labels, *ignore, *count, g.data()[0]))]
            }
        })
    }
}

/// The value of a scalar node.
pub fn scalar(graph: &Graph, id: NodeId) -> Result<f64> {
    let v = graph.value(id);
    if v.len() != 1 {
        return Err(shape_err!("expected a scalar, got {:?}", v.shape()));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite(alloc::format!("scalar value {s}")));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn kink_pattern_tracks_relu_signs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap());
        g.relu(x).unwrap();
        assert_eq!(g.kink_pattern(), [0, 1, 1]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn([2, 3, 2, 2], 1.0, &mut RngState::new(1)));
        let l = g.sum(x).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([1, 2, 3, 3]));
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1, 1, 1, 2], 3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z).unwrap();
        let gr = g.backward(l).unwrap();
        // d/dx (x^2 + x) = 2x + 1
        assert_eq!(gr.get(x).data(), &[7.0, 7.0]);
    }

    #[test]
    fn unreached_leaves_get_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1, 1, 2, 2], 1.0));
        let unused = g.param(Tensor::full([1, 2, 1, 1], 1.0));
        let l = g.sum(x).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(!gr.reached(unused));
        assert_eq!(gr.get(unused), Tensor::zeros([1, 2, 1, 1]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let w = g.param(Tensor::full([1, 1, 1, 1], 3.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let l = g.sum(y).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(!gr.reached(x));
        assert_eq!(gr.get(w).data(), &[8.0]);
    }

    #[test]
    fn ids_are_topological() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros([1, 1, 1, 1]));
        let b = g.relu(a).unwrap();
        let c = g.add(a, b).unwrap();
        assert!(a < b && b < c);
    }
}
