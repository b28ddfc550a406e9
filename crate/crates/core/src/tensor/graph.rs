//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in order. Parameters are bound
//! lazily from a borrowed [`ParamStore`] (one node per parameter, so a tensor
//! used twice, such as a shared FFN, accumulates both contributions).

use std::collections::HashMap;

use super::kernels::{self, NormStats};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate counts observed while recording.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub matmul: u64,
    pub conv: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.conv
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<T> },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Softmax { x: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize },
    MeanRows { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    CrossEntropy { logits: Var, target: Vec<T>, probs: Vec<T> },
}

#[derive(Debug)]
enum Value<T: Scalar> {
    Owned(Tensor<T>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    track_params: bool,
    macs: MacCount,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph over `store` whose parameters participate in backward.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::with_tracking(Some(store), true)
    }

    /// Graph over `store` for inference; parameters do not require gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::with_tracking(Some(store), false)
    }

    /// Graph with no parameter store; only explicit leaves.
    pub fn standalone() -> Self {
        Self::with_tracking(None, true)
    }

    fn with_tracking(store: Option<&'p ParamStore<T>>, track_params: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
            track_params,
            macs: MacCount::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = MacCount::default();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; participates in backward if `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf node that never requires a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("Graph::param called on a standalone graph");
        let rg = self.track_params && store.get(id).requires_grad;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let dims = kernels::matmul_dims(self.shape(a), self.shape(b), trans_b)?;
        let out = if trans_b {
            kernels::matmul_nt(self.value(a), self.value(b))?
        } else {
            kernels::matmul(self.value(a), self.value(b))?
        };
        self.macs.matmul += dims.macs();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Adds a `[D]` vector to every row of a `[…, D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `Σ x ⊙ weights` with constant weights; a convenient probe loss.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", tx.shape(), weights.shape()));
        }
        let s = kernels::dot(tx.data(), weights.data());
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) = kernels::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            kernels::LAYER_NORM_EPS,
        )?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom =
            kernels::ConvGeometry::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        self.macs.conv += geom.macs();
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                groups,
            },
            rg,
        ))
    }

    /// Column means of an `[N, D]` tensor (global average pooling over tokens).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows { x }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose2d(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let out = kernels::split_heads(self.value(x), heads)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, rg))
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let out = kernels::merge_heads(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MergeHeads { x }, rg))
    }

    /// Cross-entropy of a logit vector against a target distribution.
    pub fn cross_entropy(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), target)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`. Each recorded operation is
    /// visited once, newest first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.input_grads(idx, &gy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, idx: usize, gy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, trans_b } => {
                let (da, db) =
                    kernels::matmul_backward(self.value(*a), self.value(*b), gy, *trans_b)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::AddBias { x, bias } => {
                let d = self.value(*bias).numel();
                let mut db = vec![T::zero(); d];
                for row in gy.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                vec![(*x, gy.to_vec()), (*bias, db)]
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gy.iter().zip(tb.data()).map(|(&g, &v)| g * v).collect();
                let db = gy.iter().zip(ta.data()).map(|(&g, &v)| g * v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, factor } => vec![(*x, gy.iter().map(|&g| g * *factor).collect())],
            Op::Sum { x } => vec![(*x, vec![gy[0]; self.value(*x).numel()])],
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|&w| w * gy[0]).collect())]
            }
            Op::Gelu { x } => vec![(*x, kernels::gelu_backward(self.value(*x), gy))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(self.value(*x), self.value(*gamma), stats, gy);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Softmax { x } => {
                let y = match &node.value {
                    Value::Owned(t) => t,
                    Value::Param(_) => unreachable!("softmax output is owned"),
                };
                vec![(*x, kernels::softmax_rows_backward(y, gy))]
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                groups,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *padding,
                    *groups,
                )?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = bias {
                    v.push((*b, db));
                }
                v
            }
            Op::MeanRows { x } => {
                let tx = self.value(*x);
                let n = tx.shape()[0];
                let inv = T::lit(1.0 / n as f64);
                let row: Vec<T> = gy.iter().map(|&g| g * inv).collect();
                vec![(*x, row.repeat(n))]
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                // gy is [c, r]; transpose back to [r, c]
                vec![(*x, kernels::transpose_buf(gy, s[1], s[0]))]
            }
            Op::Reshape { x } => vec![(*x, gy.to_vec())],
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let gt = Tensor::from_parts(vec![*heads, s[0], s[1] / heads], gy.to_vec());
                vec![(*x, kernels::merge_heads(&gt)?.into_data())]
            }
            Op::MergeHeads { x } => {
                let s = self.shape(*x);
                let gt = Tensor::from_parts(vec![s[1], s[0] * s[2]], gy.to_vec());
                vec![(*x, kernels::split_heads(&gt, s[0])?.into_data())]
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let g = probs
                    .iter()
                    .zip(target)
                    .map(|(&p, &q)| (p - q) * gy[0])
                    .collect();
                vec![(*logits, g)]
            }
        };
        Ok(out)
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients for every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
