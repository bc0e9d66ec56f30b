//! Per-step computation graph with reverse-mode differentiation.
//!
//! Nodes live in an arena and may only reference earlier nodes, so every
//! graph is acyclic by construction and the reverse pass is a single sweep
//! over decreasing indices. Gradients are only accumulated into leaves;
//! intermediate gradients live for the duration of one [`Graph::backward`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::goodness::moment::{effective_dim, effective_dim_grad, row_runs, second_moment_rows};
use crate::ops::gemm::{gemm, transpose};
use crate::ops::{self, dropout, norm, BatchNormState, Conv2dSpec, Mode, PoolSpec};
use crate::scalar::{axpy, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A named model weight. The graph only sees a copy of its value.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter { name: name.into(), value, trainable: true }
    }
}

enum Op<T> {
    Leaf,
    /// Result of an op none of whose inputs needs a gradient.
    Constant,
    Conv2d(Conv2dSpec),
    ConvBlock { conv: Conv2dSpec, pool: PoolSpec, saved: ops::ConvBlockSaved },
    Pool { spec: PoolSpec, argmax: Option<Vec<u32>> },
    Relu,
    BatchNormTrain { inv_std: Vec<T> },
    BatchNormEval { inv_std: Vec<T> },
    Dropout { mask: Vec<T> },
    DropoutCopies { copies: usize, mask: Vec<T> },
    Linear,
    Reshape,
    ChannelSamples { basis: Option<Tensor<T>> },
    MeanAxis1 { n: usize },
    Square,
    GroupedEffDim { groups: Vec<Vec<usize>>, dmoment: Vec<Vec<T>> },
    SoftmaxCe { labels: Vec<usize>, probs: Tensor<T> },
    Mean,
    Sum,
    Combine { a: T, b: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, parents: Vec::new(), requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a parameter's value; tracked only when `track` and the parameter is trainable.
    pub fn param(&mut self, p: &Parameter<T>, track: bool) -> Var {
        let track = track && p.trainable;
        let v = self.leaf(p.value.clone(), track);
        if track {
            self.params.push((p.name.clone(), v));
        }
        v
    }

    /// Tracked parameter leaves in creation order.
    pub fn tracked_params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Gradient of the tracked parameter called `name`, zero-filled when no
    /// reverse pass reached it.
    pub fn param_grad(&self, name: &str) -> Option<Tensor<T>> {
        let &(_, v) = self.params.iter().find(|(n, _)| n == name)?;
        Some(self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
    }

    /// New leaf with the same value and no history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].parents.iter().map(|&p| Var(p)).collect()
    }

    /// Accumulated gradient of a leaf, if any reverse pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: Vec<usize>, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node { value, op, parents, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), spec)?;
        self.push(y, Op::Conv2d(spec), vec![x.0, w.0], "conv2d")
    }

    /// `pool2d(relu(conv2d(x, w)))` as one node.
    pub fn conv_block(&mut self, x: Var, w: Var, conv: Conv2dSpec, pool: PoolSpec) -> Result<Var> {
        let keep = self.tracked(&[x, w]);
        let (y, saved) = ops::conv_block(self.value(x), self.value(w), conv, pool, keep)?;
        let op = Op::ConvBlock { conv, pool, saved: saved.unwrap_or_default() };
        self.push(y, op, vec![x.0, w.0], "conv_block")
    }

    pub fn pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let pooled = ops::pool2d(self.value(x), spec)?;
        let argmax = if self.tracked(&[x]) { pooled.argmax } else { None };
        self.push(pooled.output, Op::Pool { spec, argmax }, vec![x.0], "pool2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu, vec![x.0], "relu")
    }

    pub fn batchnorm2d(&mut self, x: Var, state: &mut BatchNormState<T>, mode: Mode) -> Result<Var> {
        let n = norm::batchnorm2d(self.value(x), state, mode)?;
        let op = match mode {
            Mode::Train => Op::BatchNormTrain { inv_std: n.inv_std },
            Mode::Eval => Op::BatchNormEval { inv_std: n.inv_std },
        };
        self.push(n.output, op, vec![x.0], "batchnorm2d")
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        let (y, mask) = ops::dropout(self.value(x), p, rng)?;
        self.push(y, Op::Dropout { mask }, vec![x.0], "dropout")
    }

    /// `[B, ...] → [B, N, ...]` independently masked copies.
    pub fn dropout_copies<R: Rng + ?Sized>(&mut self, x: Var, p: f64, copies: usize, rng: &mut R) -> Result<Var> {
        let keep = self.tracked(&[x]);
        let (y, mask) = dropout::dropout_copies_masked(self.value(x), p, copies, rng, keep)?;
        let op = Op::DropoutCopies { copies, mask: mask.unwrap_or_default() };
        self.push(y, op, vec![x.0], "dropout_copies")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear, vec![x.0, w.0, b.0], "linear")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape, vec![x.0], "reshape")
    }

    /// Treats channels as variables and every (item, position) as a sample:
    /// `[B, C, H, W] → [B·H·W, k]`, optionally mapping each sample through a
    /// fixed `[k, C]` basis. Rows are ordered (item, row, column).
    pub fn channel_samples(&mut self, x: Var, basis: Option<&Tensor<T>>) -> Result<Var> {
        let y = channel_samples_forward(self.value(x), basis)?;
        let basis = basis.cloned();
        self.push(y, Op::ChannelSamples { basis }, vec![x.0], "channel_samples")
    }

    /// Mean over axis 1: `[B, N, ...] → [B, ...]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || shape[1] == 0 {
            return Err(shape_err!("mean over axis 1 needs rank ≥ 2, got {:?}", shape));
        }
        let (b, n) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); b * rest];
        let data = xv.data();
        for bi in 0..b {
            let o = &mut out[bi * rest..(bi + 1) * rest];
            for j in 0..n {
                axpy(T::one(), &data[(bi * n + j) * rest..][..rest], o);
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&shape[2..]);
        let y = Tensor::from_vec(&out_shape, out)?;
        self.push(y, Op::MeanAxis1 { n }, vec![x.0], "mean_axis1")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square, vec![x.0], "square")
    }

    /// Effective dimensionality of the second moment of each row group of `[R, k]`.
    pub fn grouped_effective_dim(&mut self, x: Var, groups: Vec<Vec<usize>>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let [rows, k] = xv.dims2()?;
        if let Some(g) = groups.iter().find(|g| g.is_empty() || g.iter().any(|&r| r >= rows)) {
            return Err(invalid!("row group {:?} is empty or out of range for {} rows", &g[..g.len().min(4)], rows));
        }
        let data = xv.data();
        let summaries: Vec<_> = groups.par_iter().map(|g| second_moment_rows(data, k, g.iter().copied())).collect();
        let out: Vec<T> = summaries.iter().map(|m| effective_dim(m, eps)).collect();
        let dmoment = if self.tracked(&[x]) {
            summaries.iter().map(|m| effective_dim_grad(m, eps)).collect()
        } else {
            Vec::new()
        };
        let y = Tensor::from_vec(&[groups.len()], out)?;
        self.push(y, Op::GroupedEffDim { groups, dmoment }, vec![x.0], "effective_dim")
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxCe { labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, vec![logits.0], "softmax_cross_entropy")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(invalid!("mean of an empty tensor"));
        }
        let m = xv.sum() / T::from_usize(xv.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean, vec![x.0], "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x.0], "sum")
    }

    /// `a·x + b·y` for equally shaped operands.
    pub fn combine(&mut self, x: Var, a: T, y: Var, b: T) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape() != yv.shape() {
            return Err(shape_err!("combine: {:?} vs {:?}", xv.shape(), yv.shape()));
        }
        let data = xv.data().iter().zip(yv.data()).map(|(&p, &q)| a * p + b * q).collect();
        let z = Tensor::from_vec(xv.shape(), data)?;
        self.push(z, Op::Combine { a, b }, vec![x.0, y.0], "combine")
    }

    /// Reverse pass from a single-element node, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!("reverse pass needs a scalar loss, got {:?}", self.nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            let parent_grads = self.node_backward(i, &g)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match grads[p].as_mut() {
                        Some(acc) => acc.add_assign(&pg)?,
                        None => grads[p] = Some(pg),
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            g.check_finite("reverse pass")?;
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        let needs = |k: usize| self.nodes[node.parents[k]].requires_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![None; node.parents.len()],
            Op::Conv2d(spec) => {
                let dx = if needs(0) {
                    Some(ops::conv2d_backward_input(g, pv(1), pv(0).shape(), *spec)?)
                } else {
                    None
                };
                let dw = if needs(1) {
                    Some(ops::conv2d_backward_weight(g, pv(0), pv(1).shape(), *spec)?)
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::ConvBlock { conv, pool, saved } => {
                let (dx, dw) =
                    ops::conv_block_backward(g, pv(0), pv(1), &node.value, *conv, *pool, saved, needs(0), needs(1))?;
                vec![dx, dw]
            }
            Op::Pool { spec, argmax } => {
                vec![Some(ops::pool2d_backward(g, pv(0).shape(), *spec, argmax.as_deref())?)]
            }
            Op::Relu => vec![Some(ops::relu_backward(g, pv(0)))],
            Op::BatchNormTrain { inv_std } => vec![Some(ops::batchnorm2d_backward(g, &node.value, inv_std)?)],
            Op::BatchNormEval { inv_std } => {
                let [_, c, h, w] = g.dims4()?;
                let mut dx = g.clone();
                for (idx, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= inv_std[(idx / (h * w)) % c];
                }
                vec![Some(dx)]
            }
            Op::Dropout { mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                vec![Some(Tensor::from_vec(g.shape(), data)?)]
            }
            Op::DropoutCopies { copies, mask } => {
                let x = pv(0);
                let b = x.shape()[0];
                let item = x.len() / b.max(1);
                let mut dx = vec![T::zero(); x.len()];
                for bi in 0..b {
                    let d = &mut dx[bi * item..(bi + 1) * item];
                    for j in 0..*copies {
                        let off = (bi * copies + j) * item;
                        for ((dv, &gv), &m) in d.iter_mut().zip(&g.data()[off..off + item]).zip(&mask[off..off + item]) {
                            *dv += gv * m;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_backward(g, pv(0), pv(1), needs(0))?;
                vec![dx, Some(dw), Some(db)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(pv(0).shape())?)],
            Op::ChannelSamples { basis } => vec![Some(channel_samples_backward(g, pv(0).shape(), basis.as_ref())?)],
            Op::MeanAxis1 { n } => {
                let x = pv(0);
                let b = x.shape()[0];
                let rest = g.len() / b.max(1);
                let inv = T::one() / T::from_usize(*n).unwrap();
                let mut dx = Vec::with_capacity(x.len());
                for bi in 0..b {
                    let gb = &g.data()[bi * rest..(bi + 1) * rest];
                    for _ in 0..*n {
                        dx.extend(gb.iter().map(|&v| v * inv));
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::Square => {
                let two = T::from_f64_lossy(2.0);
                let data = g.data().iter().zip(pv(0).data()).map(|(&a, &x)| two * x * a).collect();
                vec![Some(Tensor::from_vec(g.shape(), data)?)]
            }
            Op::GroupedEffDim { groups, dmoment } => {
                let x = pv(0);
                let [rows, k] = x.dims2()?;
                let mut dx = vec![T::zero(); rows * k];
                let two = T::from_f64_lossy(2.0);
                for ((grp, gm), &up) in groups.iter().zip(dmoment).zip(g.data()) {
                    if up == T::zero() {
                        continue;
                    }
                    // ∂ED/∂x_s = (2/n)·G·x_s for each sample s of the group
                    let scale = two * up / T::from_usize(grp.len()).unwrap();
                    let gs: Vec<T> = gm.iter().map(|&v| v * scale).collect();
                    for (r0, r1) in row_runs(grp.iter().copied()) {
                        gemm(r1 - r0, k, k, &x.data()[r0 * k..r1 * k], &gs, &mut dx[r0 * k..r1 * k], true);
                    }
                }
                vec![Some(Tensor::from_vec(&[rows, k], dx)?)]
            }
            Op::SoftmaxCe { labels, probs } => {
                vec![Some(ops::softmax_cross_entropy_backward(probs, labels, g.item()?))]
            }
            Op::Mean => {
                let x = pv(0);
                let v = g.item()? / T::from_usize(x.len()).unwrap();
                vec![Some(Tensor::full(x.shape(), v))]
            }
            Op::Sum => vec![Some(Tensor::full(pv(0).shape(), g.item()?))],
            Op::Combine { a, b } => {
                let mut dx = g.clone();
                dx.scale(*a);
                let mut dy = g.clone();
                dy.scale(*b);
                vec![Some(dx), Some(dy)]
            }
        })
    }
}

fn channel_samples_forward<T: Scalar>(x: &Tensor<T>, basis: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let hw = h * w;
    let k = match basis {
        Some(p) => {
            let [k, d] = p.dims2()?;
            if d != c {
                return Err(shape_err!("projection basis expects {} channels, activations have {}", d, c));
            }
            k
        }
        None => c,
    };
    let data = x.data();
    let mut out = vec![T::zero(); b * hw * k];
    out.par_chunks_mut(hw * k).enumerate().for_each(|(bi, ob)| {
        let xb = &data[bi * c * hw..(bi + 1) * c * hw];
        match basis {
            Some(p) => {
                // [k, hw] staging, then to rows of samples
                let mut stage = vec![T::zero(); k * hw];
                gemm(k, hw, c, p.data(), xb, &mut stage, false);
                transpose(k, hw, &stage, ob);
            }
            None => transpose(c, hw, xb, ob),
        }
    });
    Tensor::from_vec(&[b * hw, k], out)
}

fn channel_samples_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], basis: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [b, c, h, w] = match in_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err!("channel samples input must be rank 4")),
    };
    let hw = h * w;
    let k = g.len() / (b * hw).max(1);
    let gd = g.data();
    let mut dx = vec![T::zero(); b * c * hw];
    let basis_t = basis.map(|p| {
        let mut t = vec![T::zero(); k * c];
        transpose(k, c, p.data(), &mut t);
        t
    });
    dx.par_chunks_mut(c * hw).enumerate().for_each(|(bi, db)| {
        let gb = &gd[bi * hw * k..(bi + 1) * hw * k];
        match &basis_t {
            Some(pt) => {
                let mut stage = vec![T::zero(); k * hw];
                transpose(hw, k, gb, &mut stage);
                gemm(c, hw, k, pt, &stage, db, false);
            }
            None => transpose(hw, k, gb, db),
        }
    });
    Tensor::from_vec(in_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let y = g.square(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn detached_input_gets_no_grad() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap(), true);
        let y = g.square(w).unwrap();
        let d = g.detach(y);
        let z = g.square(d).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert!(!g.requires_grad(d));
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1], &[f64::MAX]).unwrap(), true);
        assert!(matches!(g.square(x), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn channel_samples_layout() {
        // B=1, C=3, H=1, W=2: rows are positions, columns channels
        let x = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let y = channel_samples_forward(&x, None).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1., 3., 5., 2., 4., 6.]);
    }

    #[test]
    fn accumulation_is_additive() {
        let build = |g: &mut Graph<f64>| {
            let x = g.leaf(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(), true);
            let sq = g.square(x).unwrap();
            let l1 = g.sum(sq).unwrap();
            let l2 = g.mean(x).unwrap();
            (x, l1, l2)
        };
        let mut g = Graph::new();
        let (x, l1, l2) = build(&mut g);
        let both = g.combine(l1, 1.0, l2, 1.0).unwrap();
        g.backward(both).unwrap();
        let joint = g.grad(x).unwrap().clone();

        let mut g = Graph::new();
        let (x, l1, l2) = build(&mut g);
        g.backward(l1).unwrap();
        g.backward(l2).unwrap();
        let split = g.grad(x).unwrap();
        for (a, b) in joint.data().iter().zip(split.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
