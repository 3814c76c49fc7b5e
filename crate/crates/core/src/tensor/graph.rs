//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass. Each
//! operation appends a node that remembers its inputs; [`Graph::backward`]
//! walks the nodes in reverse creation order and accumulates gradients into
//! each node's tensor. Evaluation is single-threaded and the accumulation
//! order is fixed, so results are bit-reproducible.

use super::ops::{self, ElementwiseKind};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Conv {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
        dil: usize,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    Upsample {
        x: VarId,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Elementwise {
        a: VarId,
        b: VarId,
        kind: ElementwiseKind,
    },
    Concat {
        xs: Vec<VarId>,
    },
    Sum {
        x: VarId,
    },
    Scale {
        x: VarId,
        k: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward-recording tape over rank-4 tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    fn check(&self, id: VarId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::usage(format!("unknown graph node {}", id.0)));
        }
        Ok(())
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Shape) -> VarId {
        self.leaf(Tensor::zeros(shape))
    }

    /// Tensor held by a node. After [`Graph::backward`] its gradient buffer
    /// is populated.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: VarId) -> Result<f64> {
        let t = self.value(id);
        if t.numel() != 1 {
            return Err(Error::usage(format!(
                "expected a scalar node, found shape {}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<VarId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = ops::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            dil,
        )?;
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad, dil }))
    }

    pub fn maxpool2d(&mut self, x: VarId, window: usize) -> Result<VarId> {
        self.check(x)?;
        let (out, argmax) = ops::maxpool_forward(self.value(x), window)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Nearest-neighbour resize; accepts any non-shrinking target size.
    pub fn upsample_to(&mut self, x: VarId, th: usize, tw: usize) -> Result<VarId> {
        self.check(x)?;
        let out = ops::upsample_to(self.value(x), th, tw)?;
        Ok(self.push(out, Op::Upsample { x }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn elementwise(&mut self, a: VarId, b: VarId, kind: ElementwiseKind) -> Result<VarId> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::elementwise(self.value(a), self.value(b), kind)?;
        Ok(self.push(out, Op::Elementwise { a, b, kind }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        for &x in xs {
            self.check(x)?;
        }
        let tensors: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let total = self.value(x).sum();
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![total]).unwrap();
        self.push(out, Op::Sum { x })
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let out = Tensor::from_vec(self.shape(x), data).unwrap();
        self.push(out, Op::Scale { x, k })
    }

    /// Mean squared error between two same-shaped tensors, as a scalar node.
    pub fn mse(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        let numel = self.value(pred).numel();
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / numel as f64))
    }

    /// Populates the gradient of every node reachable from `loss`, which
    /// must be a scalar produced by a recorded operation.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, found shape {}",
                self.value(loss).shape()
            )));
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Err(Error::usage(
                "backward called before any operation was recorded on the loss",
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let gout = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv { x, w, b, stride, pad, dil } => {
                    let out_shape = self.nodes[i].value.shape();
                    let cg = ops::conv_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        b.is_some(),
                        *stride,
                        *pad,
                        *dil,
                        out_shape,
                        &gout,
                    );
                    acc_into(&mut grads[x.0], &cg.gx);
                    acc_into(&mut grads[w.0], &cg.gw);
                    if let (Some(b), Some(gb)) = (b, cg.gb) {
                        acc_into(&mut grads[b.0], &gb);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let g = ensure(&mut grads[x.0], self.nodes[x.0].value.numel());
                    for (k, &src) in argmax.iter().enumerate() {
                        g[src] += gout[k];
                    }
                }
                Op::Upsample { x } => {
                    let src_shape = self.nodes[x.0].value.shape();
                    let dst_shape = self.nodes[i].value.shape();
                    let g = ensure(&mut grads[x.0], src_shape.numel());
                    let mut k = 0;
                    for n in 0..dst_shape.n {
                        for c in 0..dst_shape.c {
                            for oy in 0..dst_shape.h {
                                let sy = oy * src_shape.h / dst_shape.h;
                                let row = src_shape.idx(n, c, sy, 0);
                                for ox in 0..dst_shape.w {
                                    let sx = ox * src_shape.w / dst_shape.w;
                                    g[row + sx] += gout[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let out = &self.nodes[i].value;
                    let g = ensure(&mut grads[x.0], out.numel());
                    for (k, (gv, ov)) in gout.iter().zip(out.data()).enumerate() {
                        if *ov > 0.0 {
                            g[k] += gv;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let out = &self.nodes[i].value;
                    let g = ensure(&mut grads[x.0], out.numel());
                    for (k, (gv, y)) in gout.iter().zip(out.data()).enumerate() {
                        g[k] += gv * y * (1.0 - y);
                    }
                }
                Op::Elementwise { a, b, kind } => match kind {
                    ElementwiseKind::Add => {
                        acc_into(&mut grads[a.0], &gout);
                        acc_into(&mut grads[b.0], &gout);
                    }
                    ElementwiseKind::Sub => {
                        acc_into(&mut grads[a.0], &gout);
                        let g = ensure(&mut grads[b.0], gout.len());
                        for (gv, go) in g.iter_mut().zip(&gout) {
                            *gv -= go;
                        }
                    }
                    ElementwiseKind::Mul => {
                        let (a, b) = (*a, *b);
                        {
                            let bv = self.nodes[b.0].value.data();
                            let g = ensure(&mut grads[a.0], gout.len());
                            for (k, (gv, go)) in g.iter_mut().zip(&gout).enumerate() {
                                *gv += go * bv[k];
                            }
                        }
                        {
                            let av = self.nodes[a.0].value.data();
                            let g = ensure(&mut grads[b.0], gout.len());
                            for (k, (gv, go)) in g.iter_mut().zip(&gout).enumerate() {
                                *gv += go * av[k];
                            }
                        }
                    }
                },
                Op::Concat { xs } => {
                    let out_shape = self.nodes[i].value.shape();
                    let plane = out_shape.plane();
                    // Borrow shapes first; then scatter gradients per input.
                    let spans: Vec<(VarId, usize)> = xs
                        .iter()
                        .map(|&x| (x, self.nodes[x.0].value.shape().c))
                        .collect();
                    for n in 0..out_shape.n {
                        let mut c_off = 0;
                        for &(x, c) in &spans {
                            let g = ensure(&mut grads[x.0], c * plane * out_shape.n);
                            let src_start = out_shape.idx(n, c_off, 0, 0);
                            let dst_start = n * c * plane;
                            for k in 0..c * plane {
                                g[dst_start + k] += gout[src_start + k];
                            }
                            c_off += c;
                        }
                    }
                }
                Op::Sum { x } => {
                    let g = ensure(&mut grads[x.0], self.nodes[x.0].value.numel());
                    for gv in g.iter_mut() {
                        *gv += gout[0];
                    }
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    let g = ensure(&mut grads[x.0], gout.len());
                    for (gv, go) in g.iter_mut().zip(&gout) {
                        *gv += k * go;
                    }
                }
            }
            self.nodes[i].value.set_grad(gout);
        }
        // Nodes never reached keep an explicit zero gradient so callers can
        // read every leaf uniformly.
        for i in 0..=loss.0 {
            if !grads[i].is_empty() {
                let g = std::mem::take(&mut grads[i]);
                self.nodes[i].value.set_grad(g);
            } else if self.nodes[i].value.grad().is_none() {
                let n = self.nodes[i].value.numel();
                self.nodes[i].value.set_grad(vec![0.0; n]);
            }
        }
        Ok(())
    }

    /// Gradient buffer of a node; `None` before backward has run.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }
}

fn ensure(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if buf.is_empty() {
        buf.resize(len, 0.0);
    }
    debug_assert_eq!(buf.len(), len);
    buf
}

fn acc_into(buf: &mut Vec<f64>, g: &[f64]) {
    let dst = ensure(buf, g.len());
    for (d, s) in dst.iter_mut().zip(g) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![4.0, 5.0, 6.0]).unwrap());
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_via_self_multiplication() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -2.0]).unwrap());
        let sq = g.mul(a, a).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let a = g.zeros(Shape::new(1, 1, 2, 2));
        let b = g.relu(a);
        assert!(matches!(g.backward(b), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_plain_leaf() {
        let mut g = Graph::new();
        let a = g.zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn maxpool_routes_gradient_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![7.0, 7.0, 1.0, 0.0]).unwrap());
        let p = g.maxpool2d(x, 2).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_gradient_sums_replicas() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap());
        let u = g.upsample_to(x, 2, 4).unwrap();
        let loss = g.sum(u);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn mse_matches_hand_computation() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let t = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap());
        let loss = g.mse(p, t).unwrap();
        assert_eq!(g.scalar(loss).unwrap(), (1.0 + 4.0) / 2.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(t).unwrap(), &[-1.0, -2.0]);
    }
}
