//! Tape-style reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and returns parameter gradients tagged with their owning store.
//! Eval-mode graphs record the same way but refuse `backward`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{BufferId, Gradients, ParamId, ParamStore, StatUpdate, StoreId};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param { store: StoreId, id: ParamId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    ConvT { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Act(NodeId, Activation),
    Dropout { x: NodeId, mask: Vec<T> },
    MaxPool { x: NodeId, arg: Vec<u32>, k: usize },
    AvgPool { x: NodeId, k: usize },
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    Softmax(NodeId),
    Focal { logits: NodeId, labels: Vec<usize>, gamma: T, probs: Vec<T> },
    WeightedSum { x: NodeId, weights: Vec<T> },
    Sum(NodeId),
    Mean(NodeId),
    SqDist(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    frozen: HashSet<StoreId>,
    stat_updates: Vec<StatUpdate<T>>,
}

/// Probability floor used inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    /// Train-mode graph; `seed` drives every dropout mask drawn on it.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Train,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            frozen: HashSet::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Eval,
            rng: None,
            frozen: HashSet::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of `store` enter this graph as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.id());
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        self.mode == Mode::Train && ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let trainable = self.mode == Mode::Train && !self.frozen.contains(&store.id());
        self.push(store.value(id).clone(), Op::Param { store: store.id(), id }, trainable)
    }

    /// Copies the value of `x` into a leaf that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &[xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)], &xs));
        }
        let (n, out) = (xs[0], ws[0]);
        let mut v = vec![T::zero(); n * out];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear bias", &[out], self.shape(b)));
            }
            let bv = self.value(b).data();
            for row in v.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), n, xs[1]),
            MatRef::new(self.value(w).data(), out, xs[1]).t(),
            if b.is_some() { T::one() } else { T::zero() },
            &mut v,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![n, out], v)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation; `w` is `[Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &[xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0), 0, 0], &xs));
        }
        let geom = ConvGeom::conv(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d (kernel larger than padded input)", &ws, &xs))?;
        let co = ws[0];
        let mut out = vec![T::zero(); xs[0] * co * geom.out_h * geom.out_w];
        let bdata = b.map(|b| self.value(b).data().to_vec());
        kernels::conv_forward(self.value(x).data(), xs[0], &geom, self.value(w).data(), bdata.as_deref(), co, &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let v = Tensor::new(vec![xs[0], co, geom.out_h, geom.out_w], out)?;
        Ok(self.push(v, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution; `w` is `[Ci, Co, k, k]`. Output side is
    /// `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d", &[xs.first().copied().unwrap_or(0), ws.first().copied().unwrap_or(0), 0, 0], &xs));
        }
        let k = ws[2];
        let oh = ((xs[2] - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let ow = ((xs[3] - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::shape("conv_transpose2d (padding too large)", &ws, &xs)),
        };
        let co = ws[1];
        let geom = ConvGeom::conv(co, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| Error::shape("conv_transpose2d (inconsistent geometry)", &[co, oh, ow], &xs))?;
        let mut out = vec![T::zero(); xs[0] * co * oh * ow];
        let bdata = b.map(|b| self.value(b).data().to_vec());
        kernels::conv_t_forward(self.value(x).data(), xs[0], xs[1], &geom, self.value(w).data(), bdata.as_deref(), &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let v = Tensor::new(vec![xs[0], co, oh, ow], out)?;
        Ok(self.push(v, Op::ConvT { x, w, b, geom }, rg))
    }

    /// Batch normalization over every axis except 1.
    ///
    /// With `running = None` batch statistics normalize the input (train
    /// statistics); `stats_target` then receives a running-statistic update.
    /// With `running = Some((mean, var))` the given statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<(&[T], &[T])>,
        stats_target: Option<(StoreId, BufferId, BufferId)>,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape("batch_norm", &[xs.get(1).copied().unwrap_or(0)], self.shape(gamma)));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let m = (n * s) as f64;
        let xv = self.value(x).data();
        let eps = T::lit(eps);
        let (mean, var, train) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += xv[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
                    }
                    let mu = acc / T::lit(m);
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * s..(i * c + ch + 1) * s] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::lit(m);
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *h + bt[ch];
                }
            }
        }
        if train {
            if let Some((store, mid, vid)) = stats_target {
                let unbias = if m > 1.0 { T::lit(m / (m - 1.0)) } else { T::one() };
                self.stat_updates.push(StatUpdate {
                    store,
                    mean: mid,
                    var: vid,
                    batch_mean: mean,
                    batch_var: var.iter().map(|&v| v * unbias).collect(),
                });
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = Tensor::new(xs, out)?;
        Ok(self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let v = match act {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::LeakyRelu(a) => {
                let a = T::lit(a);
                self.value(x).map(|v| if v > T::zero() { v } else { a * v })
            }
            Activation::Tanh => self.value(x).map(|v| v.tanh()),
            Activation::Sigmoid => self.value(x).map(|v| T::one() / (T::one() + (-v).exp())),
        };
        let rg = self.rg(&[x]);
        self.push(v, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Tanh)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Train graphs only.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let rng = self.rng.as_mut().ok_or_else(|| Error::ModeMismatch("dropout".into()))?;
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xs = self.shape(x).to_vec();
        let out: Vec<T> = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out)?, Op::Dropout { x, mask }, rg))
    }

    fn pool_shape(&self, op: &str, x: NodeId, k: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::shape(op, &[0, 0, k, k], &xs));
        }
        Ok((xs[0] * xs[1], xs[2], xs[3], vec![xs[0], xs[1], xs[2] / k, xs[3] / k]))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (planes, h, w, os) = self.pool_shape("max_pool2d", x, k)?;
        let n: usize = os.iter().product();
        let mut out = vec![T::zero(); n];
        let mut arg = vec![0u32; n];
        kernels::max_pool(self.value(x).data(), planes, h, w, k, &mut out, &mut arg);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(os, out)?, Op::MaxPool { x, arg, k }, rg))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (planes, h, w, os) = self.pool_shape("avg_pool2d", x, k)?;
        let mut out = vec![T::zero(); os.iter().product()];
        kernels::avg_pool(self.value(x).data(), planes, h, w, k, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(os, out)?, Op::AvgPool { x, k }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let shape = vec![v.batch(), v.per_item()];
        self.reshape(x, shape)
    }

    /// Concatenates two `[N, a]`, `[N, b]` matrices into `[N, a + b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&va[i * sa[1]..(i + 1) * sa[1]]);
            out.extend_from_slice(&vb[i * sb[1]..(i + 1) * sb[1]]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![sa[0], sa[1] + sb[1]], out)?, Op::Concat(a, b), rg))
    }

    /// Row-wise softmax of `[N, K]` logits.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax", &[0, 0], &xs));
        }
        let out = softmax_rows(self.value(x).data(), xs[1]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax(x), rg))
    }

    /// Per-sample focal loss `-(1 - p_y)^gamma ln(max(p_y, floor))` on
    /// softmax probabilities of `[N, K]` logits; output `[N]`.
    pub fn focal_loss(&mut self, logits: NodeId, labels: &[usize], gamma: f64) -> Result<NodeId> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::shape("focal_loss", &[labels.len(), 0], &xs));
        }
        let k = xs[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ClassOutOfRange { index: bad, classes: k });
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let gamma = T::lit(gamma);
        let out: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| focal_value(probs[i * k + y], gamma))
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![labels.len()], out)?,
            Op::Focal { logits, labels: labels.to_vec(), gamma, probs },
            rg,
        ))
    }

    /// `sum_i weights[i] * x[i]` for a vector `x`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[T]) -> Result<NodeId> {
        if self.shape(x) != [weights.len()] {
            return Err(Error::shape("weighted_sum", &[weights.len()], self.shape(x)));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(&v, &w)| v * w).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.sum() / T::lit(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `sum (a - b)^2` as a scalar.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sq_dist", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SqDist(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.mode != Mode::Train {
            return Err(Error::EvalGraphBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param { store, id } = node.op {
                out.entries.push((store, id, g));
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        out.entries.sort_by_key(|(_, id, _)| *id);
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        f(slot.data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| add_into(d, gd));
                self.accum(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| add_into(d, gd));
                self.accum(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| d.iter_mut().zip(gd).zip(vb).for_each(|((x, &y), &w)| *x += y * w));
                self.accum(grads, *b, |d| d.iter_mut().zip(gd).zip(va).for_each(|((x, &y), &w)| *x += y * w));
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *c));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let out = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accum(grads, *x, |d| gemm(MatRef::new(gd, n, out), MatRef::new(wv, out, inp), T::one(), d));
                self.accum(grads, *w, |d| gemm(MatRef::new(gd, n, out).t(), MatRef::new(xv, n, inp), T::one(), d));
                if let Some(b) = b {
                    self.accum(grads, *b, |d| {
                        for row in gd.chunks(out) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let co = self.shape(*w)[0];
                let mut dx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![T::zero(); co]);
                kernels::conv_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    co,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.accum_opt(grads, Some(*x), dx);
                self.accum_opt(grads, Some(*w), dw);
                self.accum_opt(grads, *b, db);
            }
            Op::ConvT { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (n, ci) = (xs[0], xs[1]);
                let mut dx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![T::zero(); geom.channels]);
                kernels::conv_t_backward(
                    self.value(*x).data(),
                    n,
                    ci,
                    geom,
                    self.value(*w).data(),
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.accum_opt(grads, Some(*x), dx);
                self.accum_opt(grads, Some(*w), dw);
                self.accum_opt(grads, *b, db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let m = T::lit((n * s) as f64);
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                        for (&dy, &h) in gd[r.clone()].iter().zip(&xhat[r]) {
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * h;
                        }
                    }
                }
                self.accum(grads, *gamma, |d| add_into(d, &sum_dy_xhat));
                self.accum(grads, *beta, |d| add_into(d, &sum_dy));
                self.accum(grads, *x, |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                            let k = gv[ch] * inv_std[ch];
                            if *train {
                                let (a, bb) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                                for ((dx, &dy), &h) in d[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                                    *dx += k * (dy - a - h * bb);
                                }
                            } else {
                                for (dx, &dy) in d[r.clone()].iter_mut().zip(&gd[r]) {
                                    *dx += k * dy;
                                }
                            }
                        }
                    }
                });
            }
            Op::Act(x, act) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                match *act {
                    Activation::Relu => self.accum(grads, *x, |d| {
                        for ((dx, &dy), &v) in d.iter_mut().zip(gd).zip(xv) {
                            if v > T::zero() {
                                *dx += dy;
                            }
                        }
                    }),
                    Activation::LeakyRelu(a) => {
                        let a = T::lit(a);
                        self.accum(grads, *x, |d| {
                            for ((dx, &dy), &v) in d.iter_mut().zip(gd).zip(xv) {
                                *dx += if v > T::zero() { dy } else { a * dy };
                            }
                        })
                    }
                    Activation::Tanh => self.accum(grads, *x, |d| {
                        for ((dx, &dy), &y) in d.iter_mut().zip(gd).zip(yv) {
                            *dx += dy * (T::one() - y * y);
                        }
                    }),
                    Activation::Sigmoid => self.accum(grads, *x, |d| {
                        for ((dx, &dy), &y) in d.iter_mut().zip(gd).zip(yv) {
                            *dx += dy * y * (T::one() - y);
                        }
                    }),
                }
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, |d| {
                    d.iter_mut().zip(gd).zip(mask).for_each(|((dx, &dy), &m)| *dx += dy * m)
                });
            }
            Op::MaxPool { x, arg, k } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                self.accum(grads, *x, |d| {
                    for (o, (&dy, &a)) in gd.iter().zip(arg).enumerate() {
                        let plane = o / (oh * ow);
                        d[plane * h * w + a as usize] += dy;
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let scale = T::one() / T::lit((k * k) as f64);
                self.accum(grads, *x, |d| {
                    for (o, &dy) in gd.iter().enumerate() {
                        let plane = o / (oh * ow);
                        let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
                        for dy_ in 0..*k {
                            for dx_ in 0..*k {
                                d[plane * h * w + (oy * k + dy_) * w + ox * k + dx_] += dy * scale;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accum(grads, *x, |d| add_into(d, gd)),
            Op::Concat(a, b) => {
                let (wa, wb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let n = self.shape(*a)[0];
                self.accum(grads, *a, |d| {
                    for i in 0..n {
                        add_into(&mut d[i * wa..(i + 1) * wa], &gd[i * (wa + wb)..i * (wa + wb) + wa]);
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..n {
                        add_into(&mut d[i * wb..(i + 1) * wb], &gd[i * (wa + wb) + wa..(i + 1) * (wa + wb)]);
                    }
                });
            }
            Op::Softmax(x) => {
                let k = self.shape(*x)[1];
                let yv = node.value.data();
                self.accum(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(k).zip(gd.chunks(k)).zip(yv.chunks(k)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dx, &dy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += y * (dy - dot);
                        }
                    }
                });
            }
            Op::Focal { logits, labels, gamma, probs } => {
                let k = self.shape(*logits)[1];
                self.accum(grads, *logits, |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        let p = &probs[i * k..(i + 1) * k];
                        let dl_dp = focal_dp(p[y], *gamma) * gd[i];
                        let pt = p[y];
                        for (j, (dx, &pj)) in d[i * k..(i + 1) * k].iter_mut().zip(p).enumerate() {
                            let delta = if j == y { T::one() } else { T::zero() };
                            *dx += dl_dp * pt * (delta - pj);
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                self.accum(grads, *x, |d| d.iter_mut().zip(weights).for_each(|(dx, &w)| *dx += s * w));
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accum(grads, *x, |d| d.iter_mut().for_each(|dx| *dx += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / T::lit(self.value(*x).len() as f64);
                self.accum(grads, *x, |d| d.iter_mut().for_each(|dx| *dx += s));
            }
            Op::SqDist(a, b) => {
                let s = gd[0] + gd[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |d| {
                    for ((dx, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *dx += s * (x - y);
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((dx, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *dx -= s * (x - y);
                    }
                });
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accum_opt(&self, grads: &mut [Option<Tensor<T>>], id: Option<NodeId>, g: Option<Vec<T>>) {
        if let (Some(id), Some(g)) = (id, g) {
            self.accum(grads, id, |d| add_into(d, &g));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mx).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// `-(1 - p)^gamma ln(max(p, floor))`.
pub(crate) fn focal_value<T: Scalar>(p: T, gamma: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    let lp = p.max(floor).ln();
    let w = if gamma == T::zero() { T::one() } else { (T::one() - p).max(T::zero()).powf(gamma) };
    -w * lp
}

/// Derivative of [`focal_value`] with respect to `p`.
fn focal_dp<T: Scalar>(p: T, gamma: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    let q = (T::one() - p).max(T::zero());
    let lp = p.max(floor).ln();
    let w = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
    let dw = if gamma == T::zero() || q == T::zero() {
        T::zero()
    } else {
        -gamma * q.powf(gamma - T::one())
    };
    let dlp = if p > floor { T::one() / p } else { T::zero() };
    -(dw * lp + w * dlp)
}
