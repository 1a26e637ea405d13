//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. Nodes only ever refer to
//! earlier nodes, so walking the tape backwards from the loss is a valid
//! reverse topological order.

use crate::error::{shape_err, Error, Result};
use crate::ops::{activation, conv, loss, norm, pool, upsample};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Upsample(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: norm::BnSaved,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        /// Per-pixel class, `None` for ignored pixels; `[N*H*W]` row-major.
        targets: Vec<Option<usize>>,
    },
    SelectMean {
        x: Var,
        indices: Vec<usize>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some requires-grad leaf feeds this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. Gradients are kept for it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call w.r.t. a requires-grad leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = self.inputs(&op).iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::GlobalAvgPool(a)
            | Op::Upsample(a)
            | Op::Softmax(a) => vec![*a],
            Op::AvgPool { x, .. } => vec![*x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::SelectMean { x, .. } => vec![*x],
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_op(ta.shape().to_vec(), data, "add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_op(ta.shape().to_vec(), data, "mul")?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_op(ta.shape().to_vec(), data, "scale")?;
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = Tensor::from_op(vec![1], vec![s], "sum")?;
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let out = Tensor::from_op(vec![1], vec![s], "mean")?;
        Ok(self.push(out, Op::Mean(a)))
    }

    /// `sum(x[i] for i in indices) / denom`, summed in the given index order.
    pub fn select_mean(&mut self, x: Var, indices: Vec<usize>, denom: f64) -> Result<Var> {
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "select_mean denominator {denom}"
            )));
        }
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return shape_err(format!("select index {bad} >= {}", t.numel()));
        }
        let mut s = 0.0;
        for &i in &indices {
            s += t.data()[i];
        }
        let out = Tensor::from_op(vec![1], vec![s / denom], "select_mean")?;
        Ok(self.push(out, Op::SelectMean { x, indices, denom }))
    }

    /// Channel-wise concatenation of rank-4 tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "concat part {:?} vs [{n}, _, {h}, {w}]",
                    self.shape(p)
                ));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::from_op(vec![n, total_c, h, w], data, "concat")?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Populates `grad` on every requires-grad leaf with d(loss)/d(leaf).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if self.shape(loss) != [1] {
            return Err(Error::Backward(format!(
                "loss must have shape [1], got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Backward(format!("non-finite adjoint at node {idx}")));
            }
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[idx] = Some(g);
                continue;
            }
            for (parent, contrib) in self.vjp(idx, &g)? {
                match &mut adj[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (idx, slot) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = slot.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Vector-Jacobian products of node `idx` for each tracked input.
    fn vjp(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(tb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(ta).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|v| v * f).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Relu(a) => out.push((*a, activation::relu_backward(self.value(*a).data(), g))),
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            } => {
                let grads = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    conv::GradRequest {
                        input: self.wants(*x),
                        weight: self.wants(*weight),
                        bias: bias.is_some_and(|b| self.wants(b)),
                    },
                )?;
                if let Some(dx) = grads.input {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
            }
            Op::AvgPool { x, window, stride } => {
                let dims = self.value(*x).dims4()?;
                out.push((*x, pool::avg_pool2d_backward(dims, g, *window, *stride)));
            }
            Op::GlobalAvgPool(x) => {
                let dims = self.value(*x).dims4()?;
                out.push((*x, pool::global_avg_pool_backward(dims, g)));
            }
            Op::Upsample(x) => {
                let dims = self.value(*x).dims4()?;
                let (_, _, th, tw) = node.value.dims4()?;
                out.push((*x, upsample::bilinear_backward(dims, (th, tw), g)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let dims = self.value(*x).dims4()?;
                let grads = norm::batch_norm_backward(dims, self.value(*gamma).data(), saved, g);
                if self.wants(*x) {
                    out.push((*x, grads.input));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, grads.gamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, grads.beta));
                }
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        out.push((p, d));
                    }
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let dims = node.value.dims4()?;
                out.push((*x, activation::softmax_backward(dims, node.value.data(), g)));
            }
            Op::CrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                out.push((*probs, loss::cross_entropy_backward(p, targets, g)?));
            }
            Op::SelectMean { x, indices, denom } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                let share = g[0] / denom;
                for &i in indices {
                    d[i] += share;
                }
                out.push((*x, d));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Backward(_))));
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([3], 2.0));
        let y = tape.param(Tensor::full([1], 1.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([2], 1.0));
        let x = tape.param(Tensor::full([2], 4.0));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn overflow_is_an_error_not_inf() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1], 1e300));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn select_mean_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = tape.select_mean(x, vec![2, 0, 2], 2.0).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 3.5);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.0, 1.0]);
    }
}
