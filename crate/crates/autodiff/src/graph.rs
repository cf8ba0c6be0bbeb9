//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape in exact reverse.

use std::cell::RefCell;

use crate::kernels::{self, ConvGeom};
use crate::{Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracks_grad: bool,
}

/// Operation tape. Confined to one thread; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that requires grad.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn strides_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks_grad: requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let tracks_grad = parents.iter().any(|&p| nodes[p].tracks_grad);
        nodes.push(Node {
            value,
            op,
            tracks_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.tracks_grad {
                continue;
            }
            let val = |p: NodeId| nodes[p].value.data();
            let mut acc = |p: NodeId, contrib: Vec<f64>| {
                if !nodes[p].tracks_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(
                        Tensor::new(node.value.shape(), g).expect("gradient shape matches value"),
                    );
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b)).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(val(*a)).map(|(g, a)| g * a).collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    let sa = nodes[*a].value.shape();
                    let sb = nodes[*b].value.shape();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    acc(*a, kernels::matmul_bt(&g, val(*b), m, n, k));
                    acc(*b, kernels::matmul_at(val(*a), &g, m, k, n));
                }
                Op::BiasAdd(x, b) => {
                    let shape = nodes[*x].value.shape();
                    let (outer, c, inner) = strides_around(shape, 1);
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            db[ch] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    acc(*b, db);
                    acc(*x, g);
                }
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), &g, geom);
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::ConvTranspose2d { x, w, geom } => {
                    let (dx, dw) = kernels::conv_transpose2d_backward(val(*x), val(*w), &g, geom);
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::LeakyRelu(a, alpha) => {
                    let x = val(*a);
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else { g * alpha })
                            .collect(),
                    );
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Log(a) => {
                    acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect());
                }
                Op::Square(a) => {
                    acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect());
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    acc(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, total, inner) = strides_around(out_shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let d = nodes[p].value.shape()[*axis];
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + d * inner]);
                        }
                        offset += d;
                        acc(p, part);
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    end,
                } => {
                    let in_shape = nodes[*x].value.shape();
                    let (outer, total, inner) = strides_around(in_shape, *axis);
                    let width = end - start;
                    let mut dx = vec![0.0; outer * total * inner];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * width * inner;
                        dx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                    }
                    acc(*x, dx);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).data()[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = {
            let x = self.graph.value_of(self.id);
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
                .expect("elementwise preserves shape")
        };
        self.graph.push(out, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        let out = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            Tensor::new(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .expect("elementwise preserves shape")
        };
        Ok(self.graph.push(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// `max(x, 0) + alpha * min(x, 0)`. At exactly zero the backward pass
    /// uses slope `alpha`.
    pub fn leaky_relu(self, alpha: f64) -> Var<'g> {
        self.unary(Op::LeakyRelu(self.id, alpha), |v| if v > 0.0 { v } else { alpha * v })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sum(self) -> Var<'g> {
        let total = self.graph.value_of(self.id).data().iter().sum::<f64>();
        self.graph
            .push(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let out = {
            let x = self.graph.value_of(self.id);
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        self.graph.push(Tensor::scalar(out), Op::Mean(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let out = self.graph.value_of(self.id).clone().reshaped(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id), &[self.id]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        let out = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", sa, sb));
            }
            let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
            Tensor::new(&[sa[0], sb[1]], data).expect("matmul shape")
        };
        Ok(self
            .graph
            .push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn bias_add(self, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        let out = {
            let x = self.graph.value_of(self.id);
            let b = self.graph.value_of(bias.id);
            if x.rank() < 2 || b.rank() != 1 || b.len() != x.shape()[1] {
                return Err(mismatch("bias_add", x.shape(), b.shape()));
            }
            let (outer, c, inner) = strides_around(x.shape(), 1);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for v in &mut data[base..base + inner] {
                        *v += b.data()[ch];
                    }
                }
            }
            Tensor::new(x.shape(), data).expect("bias_add shape")
        };
        Ok(self
            .graph
            .push(out, Op::BiasAdd(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Input `[N, C, H, W]`, kernel `[O, C, KH, KW]`, output `[N, O, OH, OW]`.
    pub fn conv2d(
        self,
        kernel: Var<'g>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>, TensorError> {
        let (out, geom) = {
            let x = self.graph.value_of(self.id);
            let w = self.graph.value_of(kernel.id);
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
                return Err(mismatch("conv2d", sx, sw));
            }
            let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
            if h + 2 * padding < kh || wd + 2 * padding < kw {
                return Err(mismatch("conv2d", sx, sw));
            }
            let geom = ConvGeom {
                n: sx[0],
                c_in: sx[1],
                h,
                w: wd,
                c_out: sw[0],
                kh,
                kw,
                stride,
                pad: padding,
                oh: (h + 2 * padding - kh) / stride + 1,
                ow: (wd + 2 * padding - kw) / stride + 1,
            };
            let data = kernels::conv2d_forward(x.data(), w.data(), &geom);
            (
                Tensor::new(&[geom.n, geom.c_out, geom.oh, geom.ow], data).expect("conv shape"),
                geom,
            )
        };
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Input `[N, C, H, W]`, kernel `[C, O, KH, KW]`, output
    /// `[N, O, (H-1)*stride - 2*padding + KH, ...]`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'g>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>, TensorError> {
        let (out, geom) = {
            let x = self.graph.value_of(self.id);
            let w = self.graph.value_of(kernel.id);
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
                return Err(mismatch("conv_transpose2d", sx, sw));
            }
            let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
            let full_h = (h - 1) * stride + kh;
            let full_w = (wd - 1) * stride + kw;
            if full_h <= 2 * padding || full_w <= 2 * padding {
                return Err(mismatch("conv_transpose2d", sx, sw));
            }
            let geom = ConvGeom {
                n: sx[0],
                c_in: sx[1],
                h,
                w: wd,
                c_out: sw[1],
                kh,
                kw,
                stride,
                pad: padding,
                oh: full_h - 2 * padding,
                ow: full_w - 2 * padding,
            };
            let data = kernels::conv_transpose2d_forward(x.data(), w.data(), &geom);
            (
                Tensor::new(&[geom.n, geom.c_out, geom.oh, geom.ow], data).expect("tconv shape"),
                geom,
            )
        };
        Ok(self.graph.push(
            out,
            Op::ConvTranspose2d {
                x: self.id,
                w: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Slice `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>, TensorError> {
        let out = {
            let x = self.graph.value_of(self.id);
            if axis >= x.rank() || start >= end || end > x.shape()[axis] {
                return Err(TensorError::BadSlice {
                    shape: x.shape().to_vec(),
                    axis,
                    start,
                    end,
                });
            }
            let (outer, total, inner) = strides_around(x.shape(), axis);
            let width = end - start;
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&x.data()[base..base + width * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = width;
            Tensor::new(&shape, data).expect("slice shape")
        };
        Ok(self.graph.push(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
                end,
            },
            &[self.id],
        ))
    }

    /// Concatenate along `axis`; every other dimension must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let graph = first.graph;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| graph.value_of(p.id)).collect();
            let base_shape = values[0].shape().to_vec();
            if axis >= base_shape.len() {
                return Err(mismatch("concat", &base_shape, &base_shape));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let compatible = s.len() == base_shape.len()
                    && s.iter()
                        .zip(&base_shape)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &base_shape, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = strides_around(&base_shape, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let d = v.shape()[axis];
                    let base = o * d * inner;
                    data.extend_from_slice(&v.data()[base..base + d * inner]);
                }
            }
            let mut shape = base_shape;
            shape[axis] = total;
            Tensor::new(&shape, data).expect("concat shape")
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(
            out,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }
}
