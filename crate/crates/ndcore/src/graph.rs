//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Each node
//! records the op that produced it and the ids of its inputs; ids are handed
//! out in creation order, so the tape is always topologically sorted and
//! backward is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::{self, BinaryOp, Broadcast, Divisor, ReduceOp, ReducePlan};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        k: T,
    },
    Sqrt {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Reduce {
        op: ReduceOp,
        a: Var,
        plan: ReducePlan,
        divisor: Divisor,
        mean: Option<Tensor<T>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// Unfolded input, kept only when gradients are needed.
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2 {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    IndexSelect0 {
        a: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A graph that never marks anything as requiring gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf: its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value onto the graph as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let plan = ops::broadcast_plan(av.shape(), bv.shape())?;
        let out = ops::elementwise(op, av, bv)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary { op, a, b, plan }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.node(a)?.value.map(|v| v + k);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::AddScalar { a }, rg))
    }

    pub fn mul_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.node(a)?.value.map(|v| v * k);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MulScalar { a, k }, rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = ops::sqrt(&self.node(a)?.value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sqrt { a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(&self.node(a)?.value);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Relu { a }, rg))
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize], divisor: Divisor) -> Result<Var> {
        let x = &self.node(a)?.value;
        let plan = ReducePlan::new(x.shape(), axes)?;
        let (out, mean) = ops::reduce_with_plan(op, x, &plan, divisor)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::Reduce {
                op,
                a,
                plan,
                divisor,
                mean,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes, Divisor::N)
    }

    /// Population variance over `axes`.
    pub fn variance(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Variance, a, axes, Divisor::N)
    }

    /// Mean over every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.node(a)?.value.rank()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.mean(a, &axes)
    }

    /// Sum over every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.numel();
        let m = self.mean_all(a)?;
        self.mul_scalar(m, T::from_f64(n as f64))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let (out, cols) = ops::conv2d_unfolded(&self.node(x)?.value, &self.node(w)?.value, bias, stride, pad)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad, cols }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let out = ops::linear(&self.node(x)?.value, &self.node(w)?.value, bias)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let out = ops::avg_pool2(&self.node(a)?.value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::AvgPool2 { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a)?.value.reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn index_select0(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let out = ops::index_select0(&self.node(a)?.value, index)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::IndexSelect0 {
                a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = ops::cross_entropy(&self.node(logits)?.value, labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. May be called once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let seed = root.value.ones_like();
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);
        let mut leaves = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, g: Tensor<T>| -> Result<()> {
                if !nodes[v.0].requires_grad {
                    return Ok(());
                }
                accumulate(&mut grads[v.0], g)
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(id), grad);
                }
                Op::Binary { op, a, b, plan } => {
                    let (a, b, plan, op) = (*a, *b, *plan, *op);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (gd, ad, bd) = (grad.data(), av.data(), bv.data());
                    if nodes[a.0].requires_grad {
                        let ga = match op {
                            BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                            BinaryOp::Mul => plan.map_pair(gd, bd, |g, y| g * y),
                            BinaryOp::Div => plan.map_pair(gd, bd, |g, y| g / y),
                        };
                        send(a, Tensor::new(av.shape(), ga)?)?;
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = bv.zeros_like();
                        let out = gb.data_mut();
                        let n = gd.len();
                        match op {
                            BinaryOp::Add => plan.fold_into(out, n, |i, _| gd[i]),
                            BinaryOp::Sub => plan.fold_into(out, n, |i, _| -gd[i]),
                            BinaryOp::Mul => plan.fold_into(out, n, |i, _| gd[i] * ad[i]),
                            BinaryOp::Div => plan.fold_into(out, n, |i, k| {
                                let y = bd[k];
                                -gd[i] * ad[i] / (y * y)
                            }),
                        }
                        send(b, gb)?;
                    }
                }
                Op::AddScalar { a } => send(*a, grad)?,
                Op::MulScalar { a, k } => {
                    let k = *k;
                    send(*a, grad.map(|g| g * k))?
                }
                Op::Sqrt { a } => {
                    let y = &node.value;
                    if let Some(pos) = y.data().iter().position(|v| *v < T::DIV_FLOOR) {
                        return Err(TensorError::DivisionDomain {
                            floor: T::DIV_FLOOR.as_f64(),
                            positions: vec![pos],
                        });
                    }
                    let half = T::from_f64(0.5);
                    let g: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| g * half / y)
                        .collect();
                    send(*a, Tensor::new(y.shape(), g)?)?
                }
                Op::Relu { a } => {
                    let g: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(nodes[a.0].value.data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    send(*a, Tensor::new(grad.shape(), g)?)?
                }
                Op::Reduce {
                    op,
                    a,
                    plan,
                    divisor,
                    mean,
                } => {
                    let x = &nodes[a.0].value;
                    let gd = grad.data();
                    let mut gx = x.zeros_like();
                    let out = gx.data_mut();
                    match op {
                        ReduceOp::Mean => {
                            let n = T::from_f64(plan.count as f64);
                            plan.for_each(|i, o| out[i] = gd[o] / n);
                        }
                        ReduceOp::Variance => {
                            let denom = match divisor {
                                Divisor::N => plan.count,
                                Divisor::NMinusOne => plan.count - 1,
                            };
                            let scale = T::from_f64(2.0 / denom as f64);
                            let m = mean.as_ref().expect("variance keeps its mean").data();
                            let xd = x.data();
                            plan.for_each(|i, o| out[i] = gd[o] * scale * (xd[i] - m[o]));
                        }
                    }
                    send(*a, gx)?
                }
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let need_x = nodes[x.0].requires_grad;
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &grad,
                        *stride,
                        *pad,
                        need_x,
                        cols,
                    )?;
                    if let Some(gx) = gx {
                        send(*x, gx)?;
                    }
                    send(*w, gw)?;
                    if let Some(b) = b {
                        send(*b, gb)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (bsz, fin, fout) = ops::linear_dims(xv, wv, None)?;
                    if nodes[x.0].requires_grad {
                        // dX[B,In] = dY[B,Out] * W[Out,In]
                        let mut gx = xv.zeros_like();
                        ops::gemm(bsz, fout, fin, grad.data(), false, wv.data(), false, gx.data_mut(), false);
                        send(*x, gx)?;
                    }
                    // dW[Out,In] = dY^T[Out,B] * X[B,In]
                    let mut gw = wv.zeros_like();
                    ops::gemm(fout, bsz, fin, grad.data(), true, xv.data(), false, gw.data_mut(), false);
                    send(*w, gw)?;
                    if let Some(b) = b {
                        let mut gb = vec![T::zero(); fout];
                        for row in grad.data().chunks(fout) {
                            for (acc, &g) in gb.iter_mut().zip(row) {
                                *acc = *acc + g;
                            }
                        }
                        send(*b, Tensor::new(&[fout], gb)?)?;
                    }
                }
                Op::AvgPool2 { a } => {
                    let x = &nodes[a.0].value;
                    let s = x.shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let mut gx = x.zeros_like();
                    let out = gx.data_mut();
                    let gd = grad.data();
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gd[(p * oh + oy) * ow + ox] * quarter;
                                let i = p * h * w + 2 * oy * w + 2 * ox;
                                for j in [i, i + 1, i + w, i + w + 1] {
                                    out[j] = out[j] + g;
                                }
                            }
                        }
                    }
                    send(*a, gx)?
                }
                Op::Reshape { a } => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    send(*a, Tensor::new(&shape, grad.into_data())?)?
                }
                Op::IndexSelect0 { a, index } => {
                    let x = &nodes[a.0].value;
                    let row = x.numel() / x.shape()[0];
                    let mut gx = x.zeros_like();
                    let out = gx.data_mut();
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..row {
                            out[src * row + j] = out[src * row + j] + grad.data()[r * row + j];
                        }
                    }
                    send(*a, gx)?
                }
                Op::CrossEntropy { logits, labels } => {
                    let upstream = grad.data()[0];
                    let mut probs = ops::softmax_rows(&nodes[logits.0].value)?;
                    let k = probs.shape()[1];
                    let scale = upstream / T::from_f64(labels.len() as f64);
                    for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
                        row[y] = row[y] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    send(*logits, probs)?
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "gradient accumulation",
                    lhs: existing.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn scalar_weight_times_input_sums_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, -0.5, 4.0]));
        let w = g.param(Tensor::scalar(3.0));
        let wx = g.mul(x, w).unwrap();
        let loss = g.sum_all(wx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().item().unwrap() - 6.5).abs() < 1e-12);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn mse_gradient_is_two_residual_over_n() {
        let (xs, ts) = ([0.5, -1.0, 2.0], [0.0, 1.0, 1.5]);
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &xs));
        let target = g.constant(t(&[3], &ts));
        let r = g.sub(x, target).unwrap();
        let sq = g.mul(r, r).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, gv) in grads.get(x).unwrap().data().iter().enumerate() {
            assert!((gv - 2.0 * (xs[i] - ts[i]) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        assert!(!g.is_consumed());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(4.0));
    }

    #[test]
    fn no_grad_graph_reports_nothing() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.mul(x, x).unwrap();
        assert!(!g.requires_grad(y));
        assert!(g.backward(y).unwrap().is_empty());
    }

    #[test]
    fn broadcast_gradient_sums_over_spatial() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 3, 2, 2]).unwrap());
        let b = g.param(Tensor::zeros(&[2, 3]).unwrap());
        let y = g.add(x, b).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(b).unwrap().data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}
