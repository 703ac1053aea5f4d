//! Tape-based reverse-mode differentiation over the op set.
//!
//! A [`Tape`] records every forward operation in execution order together
//! with the intermediates the backward pass needs. [`Tape::backward`] walks
//! the records in exact reverse order, accumulating parameter gradients into
//! a [`Params`] store. Leaf gradients (for receptive-field maps and gradient
//! checks) can be requested explicitly.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::{
    activation_grad_scalar, activation_scalar, group_norm_with_stats, Activation, GroupNormStats,
    Tensor,
};

/// Stable handle of a trainable tensor inside a [`Params`] store.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor: value plus an additively-accumulated gradient slot.
#[derive(Clone, Debug)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered store of all parameters of a model. Order is build order; the
/// checkpoint format serializes values in exactly this order.
#[derive(Clone, Debug, Default)]
pub struct Params<T: Real> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name: name.into(), value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Total number of trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All parameter values flattened in build order.
    pub fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Overwrite all values from a flat vector in build order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.total_scalars() {
            return Err(Error::Validation(format!(
                "flat parameter vector has {} scalars, model needs {}",
                flat.len(),
                self.total_scalars()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn accum_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let dst = &mut self.entries[id.0].grad;
        for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
            *d += s;
        }
    }
}

pub type NodeId = usize;

enum OpRecord<T: Real> {
    Leaf,
    Param { id: ParamId },
    Activation { kind: Activation, x: NodeId },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: GroupNormStats<T> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, dilation: usize, groups: usize },
    MaxPoolTo { x: NodeId, argmax: Vec<u32> },
    UpsampleTo { x: NodeId },
    GlobalAvgPool { x: NodeId },
    SliceChannels { x: NodeId, c0: usize },
    Concat { parts: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: T },
    ChanScale { x: NodeId, s: NodeId },
    RadixSoftmax { logits: NodeId, log_tau: NodeId, radix: usize },
    Sum { x: NodeId },
    SoftIou { conf: NodeId, gt: Tensor<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: OpRecord<T>,
    needs_grad: bool,
}

/// Recorded computation graph; nodes are stored in execution order and the
/// backward pass traverses them in exact reverse order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: OpRecord<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, OpRecord::Leaf, false)
    }

    /// A leaf whose gradient is retrievable through `backward_keep`.
    pub fn leaf_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, OpRecord::Leaf, true)
    }

    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> NodeId {
        self.push(params.value(id).clone(), OpRecord::Param { id }, true)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let v = crate::tensor::activation(&self.nodes[x].value, kind);
        let ng = self.ng(x);
        self.push(v, OpRecord::Activation { kind, x }, ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: T,
    ) -> Result<NodeId> {
        let gamma_v = self.nodes[gamma].value.clone();
        let beta_v = self.nodes[beta].value.clone();
        let (v, stats) =
            group_norm_with_stats(&self.nodes[x].value, gamma_v.data(), beta_v.data(), groups, eps)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(v, OpRecord::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let bias_vec = b.map(|bid| self.nodes[bid].value.data().to_vec());
        let v = ops::conv2d_raw(
            &self.nodes[x].value,
            &self.nodes[w].value,
            bias_vec.as_deref(),
            stride,
            dilation,
            groups,
        )?;
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |bid| self.ng(bid));
        Ok(self.push(v, OpRecord::Conv2d { x, w, b, stride, dilation, groups }, ng))
    }

    pub fn maxpool_to(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let (v, argmax) = ops::maxpool_to_with_argmax(&self.nodes[x].value, th, tw)?;
        let ng = self.ng(x);
        Ok(self.push(v, OpRecord::MaxPoolTo { x, argmax }, ng))
    }

    pub fn upsample_nearest_to(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let v = ops::upsample_nearest_to(&self.nodes[x].value, th, tw)?;
        let ng = self.ng(x);
        Ok(self.push(v, OpRecord::UpsampleTo { x }, ng))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = ops::global_avg_pool(&self.nodes[x].value);
        let ng = self.ng(x);
        self.push(v, OpRecord::GlobalAvgPool { x }, ng)
    }

    pub fn slice_channels(&mut self, x: NodeId, c0: usize, count: usize) -> Result<NodeId> {
        let s = self.nodes[x].value.shape();
        if c0 + count > s.c {
            return Err(Error::Shape(format!(
                "channel slice [{c0}, {}) out of range for {} channels",
                c0 + count,
                s.c
            )));
        }
        let v = crate::tensor::channel_slice(&self.nodes[x].value, c0, count);
        let ng = self.ng(x);
        Ok(self.push(v, OpRecord::SliceChannels { x, c0 }, ng))
    }

    pub fn split_channels(&mut self, x: NodeId, parts: usize) -> Result<Vec<NodeId>> {
        let s = self.nodes[x].value.shape();
        if parts == 0 || s.c % parts != 0 {
            return Err(Error::Config(format!(
                "channel_split: {} channels not divisible into {parts} parts",
                s.c
            )));
        }
        let cp = s.c / parts;
        (0..parts).map(|p| self.slice_channels(x, p * cp, cp)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = crate::tensor::channel_concat(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, OpRecord::Concat { parts: parts.to_vec() }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, OpRecord::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, OpRecord::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.nodes[x].value.map(|u| u * k);
        let ng = self.ng(x);
        self.push(v, OpRecord::Scale { x, k }, ng)
    }

    /// Multiply by a per-channel vector `s` of shape (1, c, 1, 1) (broadcast
    /// over batch and space) or (n, c, 1, 1) (broadcast over space only).
    pub fn chan_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape();
        let ss = self.nodes[s].value.shape();
        if ss.c != xs.c || ss.h != 1 || ss.w != 1 || (ss.n != 1 && ss.n != xs.n) {
            return Err(Error::Shape(format!(
                "chan_scale: scale shape {ss} incompatible with input {xs}"
            )));
        }
        let mut v = Tensor::zeros(xs);
        {
            let xv = self.nodes[x].value.data();
            let sv = self.nodes[s].value.data();
            let plane = xs.plane();
            for n in 0..xs.n {
                let sn = if ss.n == 1 { 0 } else { n };
                for c in 0..xs.c {
                    let k = sv[sn * ss.c + c];
                    let base = (n * xs.c + c) * plane;
                    for i in 0..plane {
                        v.data_mut()[base + i] = xv[base + i] * k;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, OpRecord::ChanScale { x, s }, ng))
    }

    /// Softmax with learnable temperature across the radix axis. `logits` has
    /// shape (n, radix*c, 1, 1) laid out radix-major (branch j owns channels
    /// [j*c, (j+1)*c)); `log_tau` is a scalar node and tau = exp(log_tau).
    pub fn radix_softmax(&mut self, logits: NodeId, log_tau: NodeId, radix: usize) -> Result<NodeId> {
        let s = self.nodes[logits].value.shape();
        if s.h != 1 || s.w != 1 || radix == 0 || s.c % radix != 0 {
            return Err(Error::Shape(format!(
                "radix_softmax: logits shape {s} not divisible into radix {radix}"
            )));
        }
        if self.nodes[log_tau].value.len() != 1 {
            return Err(Error::Usage("radix_softmax: log_tau must be a scalar node".into()));
        }
        let tau = self.nodes[log_tau].value.data()[0].exp();
        let c = s.c / radix;
        let mut v = Tensor::zeros(s);
        {
            let lv = self.nodes[logits].value.data();
            for n in 0..s.n {
                for ch in 0..c {
                    let mut mx = lv[n * s.c + ch] / tau;
                    for j in 1..radix {
                        mx = mx.maximum(lv[n * s.c + j * c + ch] / tau);
                    }
                    let mut total = T::ZERO;
                    for j in 0..radix {
                        let e = (lv[n * s.c + j * c + ch] / tau - mx).exp();
                        v.data_mut()[n * s.c + j * c + ch] = e;
                        total += e;
                    }
                    for j in 0..radix {
                        v.data_mut()[n * s.c + j * c + ch] /= total;
                    }
                }
            }
        }
        let ng = self.ng(logits) || self.ng(log_tau);
        Ok(self.push(v, OpRecord::RadixSoftmax { logits, log_tau, radix }, ng))
    }

    /// Sum of all entries, as a (1,1,1,1) scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x].value.sum());
        let ng = self.ng(x);
        self.push(v, OpRecord::Sum { x }, ng)
    }

    /// Differentiable soft intersection-over-union loss against a constant
    /// ground-truth mask: 1 - sum(x*y) / sum(x + y - x*y).
    pub fn soft_iou(&mut self, conf: NodeId, gt: &Tensor<T>) -> Result<NodeId> {
        let c = &self.nodes[conf].value;
        if c.shape() != gt.shape() {
            return Err(Error::Shape(format!(
                "soft_iou: confidence {} vs ground truth {}",
                c.shape(),
                gt.shape()
            )));
        }
        let mut inter = T::ZERO;
        let mut union = T::ZERO;
        for (&x, &y) in c.data().iter().zip(gt.data()) {
            inter += x * y;
            union += x + y - x * y;
        }
        let loss = if union > T::ZERO { T::ONE - inter / union } else { T::ZERO };
        let ng = self.ng(conf);
        Ok(self.push(Tensor::scalar(loss), OpRecord::SoftIou { conf, gt: gt.clone() }, ng))
    }

    /// Total conv FLOPs (2 x bias-free MACs) of every convolution recorded on
    /// this tape, at the resolutions actually executed. Used to cross-check
    /// the analytic cost model.
    pub fn recorded_conv_flops(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                OpRecord::Conv2d { w, .. } => {
                    let out = n.value.shape();
                    2 * self.nodes[*w].value.len() as u64 * (out.n * out.h * out.w) as u64
                }
                _ => 0,
            })
            .sum()
    }

    /// Reverse pass accumulating parameter gradients.
    pub fn backward(&self, loss: NodeId, params: &mut Params<T>) -> Result<()> {
        self.backward_keep(loss, Some(params), &[]).map(|_| ())
    }

    /// Reverse pass; returns gradients for the requested nodes (in `keep`
    /// order). `params` may be omitted when only leaf gradients are wanted.
    pub fn backward_keep(
        &self,
        loss: NodeId,
        mut params: Option<&mut Params<T>>,
        keep: &[NodeId],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss node must be scalar, got shape {}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss + 1, || None);
        grads[loss] = Some(Tensor::scalar(T::ONE));
        let mut kept: Vec<Option<Tensor<T>>> = vec![None; keep.len()];

        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(k) = keep.iter().position(|&kid| kid == i) {
                kept[k] = Some(g.clone());
            }
            match &self.nodes[i].op {
                OpRecord::Leaf => {}
                OpRecord::Param { id } => {
                    if let Some(p) = params.as_deref_mut() {
                        p.accum_grad(*id, &g);
                    }
                }
                OpRecord::Activation { kind, x } => {
                    if self.ng(*x) {
                        let k = *kind;
                        let dx = crate::tensor::par_binary(&self.nodes[*x].value, &g, |v, gv| {
                            gv * activation_grad_scalar(k, v)
                        });
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dgamma, dbeta) = group_norm_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*gamma].value,
                        *groups,
                        stats,
                        &g,
                    );
                    if self.ng(*x) {
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*gamma) {
                        accum(&mut grads, *gamma, dgamma);
                    }
                    if self.ng(*beta) {
                        accum(&mut grads, *beta, dbeta);
                    }
                }
                OpRecord::Conv2d { x, w, b, stride, dilation, groups } => {
                    if self.ng(*x) {
                        let dx = ops::conv2d_grad_x(
                            &g,
                            &self.nodes[*w].value,
                            self.nodes[*x].value.shape(),
                            *stride,
                            *dilation,
                            *groups,
                        );
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let dw = ops::conv2d_grad_w(
                            &self.nodes[*x].value,
                            &g,
                            self.nodes[*w].value.shape(),
                            *stride,
                            *dilation,
                            *groups,
                        );
                        accum(&mut grads, *w, dw);
                    }
                    if let Some(bid) = b {
                        if self.ng(*bid) {
                            let db = ops::conv2d_grad_b(&g);
                            let bs = self.nodes[*bid].value.shape();
                            let db_t = Tensor::new(bs, db).expect("bias shape");
                            accum(&mut grads, *bid, db_t);
                        }
                    }
                }
                OpRecord::MaxPoolTo { x, argmax } => {
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                        for (k, &gv) in g.data().iter().enumerate() {
                            dx.data_mut()[argmax[k] as usize] += gv;
                        }
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::UpsampleTo { x } => {
                    if self.ng(*x) {
                        let dx = ops::upsample_grad_x(&g, self.nodes[*x].value.shape());
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::GlobalAvgPool { x } => {
                    if self.ng(*x) {
                        let xs = self.nodes[*x].value.shape();
                        let inv = T::ONE / T::from_usize(xs.plane());
                        let mut dx = Tensor::zeros(xs);
                        for n in 0..xs.n {
                            for c in 0..xs.c {
                                let gv = g.data()[n * xs.c + c] * inv;
                                for v in dx.plane_mut(n, c) {
                                    *v += gv;
                                }
                            }
                        }
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::SliceChannels { x, c0 } => {
                    if self.ng(*x) {
                        let xs = self.nodes[*x].value.shape();
                        let gs = g.shape();
                        let mut dx = Tensor::zeros(xs);
                        let plane = xs.plane();
                        for n in 0..xs.n {
                            for c in 0..gs.c {
                                let src = g.plane(n, c);
                                let dst = dx.plane_mut(n, c0 + c);
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        let _ = plane;
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::Concat { parts } => {
                    let mut c_off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.shape().c;
                        if self.ng(p) {
                            let dp = crate::tensor::channel_slice(&g, c_off, pc);
                            accum(&mut grads, p, dp);
                        }
                        c_off += pc;
                    }
                }
                OpRecord::Add { a, b } => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, g.clone());
                    }
                }
                OpRecord::Mul { a, b } => {
                    if self.ng(*a) {
                        let da = g.zip_map(&self.nodes[*b].value, |gv, bv| gv * bv).unwrap();
                        accum(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.zip_map(&self.nodes[*a].value, |gv, av| gv * av).unwrap();
                        accum(&mut grads, *b, db);
                    }
                }
                OpRecord::Scale { x, k } => {
                    if self.ng(*x) {
                        accum(&mut grads, *x, g.map(|v| v * *k));
                    }
                }
                OpRecord::ChanScale { x, s } => {
                    let xs = self.nodes[*x].value.shape();
                    let ss = self.nodes[*s].value.shape();
                    let plane = xs.plane();
                    if self.ng(*x) {
                        let sv = self.nodes[*s].value.data();
                        let mut dx = Tensor::zeros(xs);
                        for n in 0..xs.n {
                            let sn = if ss.n == 1 { 0 } else { n };
                            for c in 0..xs.c {
                                let k = sv[sn * ss.c + c];
                                let base = (n * xs.c + c) * plane;
                                for i in 0..plane {
                                    dx.data_mut()[base + i] += g.data()[base + i] * k;
                                }
                            }
                        }
                        accum(&mut grads, *x, dx);
                    }
                    if self.ng(*s) {
                        let xv = self.nodes[*x].value.data();
                        let mut ds = Tensor::zeros(ss);
                        for n in 0..xs.n {
                            let sn = if ss.n == 1 { 0 } else { n };
                            for c in 0..xs.c {
                                let base = (n * xs.c + c) * plane;
                                let mut acc = T::ZERO;
                                for i in 0..plane {
                                    acc += g.data()[base + i] * xv[base + i];
                                }
                                ds.data_mut()[sn * ss.c + c] += acc;
                            }
                        }
                        accum(&mut grads, *s, ds);
                    }
                }
                OpRecord::RadixSoftmax { logits, log_tau, radix } => {
                    let s = self.nodes[i].value.shape();
                    let c = s.c / radix;
                    let wv = self.nodes[i].value.data();
                    let lv = self.nodes[*logits].value.data();
                    let tau = self.nodes[*log_tau].value.data()[0].exp();
                    let mut dl = Tensor::zeros(s);
                    let mut d_log_tau = T::ZERO;
                    for n in 0..s.n {
                        for ch in 0..c {
                            let mut dot = T::ZERO;
                            let mut lbar = T::ZERO;
                            for j in 0..*radix {
                                let idx = n * s.c + j * c + ch;
                                dot += g.data()[idx] * wv[idx];
                                lbar += wv[idx] * lv[idx];
                            }
                            for j in 0..*radix {
                                let idx = n * s.c + j * c + ch;
                                dl.data_mut()[idx] =
                                    wv[idx] * (g.data()[idx] - dot) / tau;
                                // d/d(log tau): w_j * g_j * (lbar - l_j) / tau
                                d_log_tau += g.data()[idx] * wv[idx] * (lbar - lv[idx]) / tau;
                            }
                        }
                    }
                    if self.ng(*logits) {
                        accum(&mut grads, *logits, dl);
                    }
                    if self.ng(*log_tau) {
                        accum(&mut grads, *log_tau, Tensor::scalar(d_log_tau));
                    }
                }
                OpRecord::Sum { x } => {
                    if self.ng(*x) {
                        let gv = g.data()[0];
                        let dx = Tensor::full(self.nodes[*x].value.shape(), gv);
                        accum(&mut grads, *x, dx);
                    }
                }
                OpRecord::SoftIou { conf, gt } => {
                    if self.ng(*conf) {
                        let cv = &self.nodes[*conf].value;
                        let mut inter = T::ZERO;
                        let mut union = T::ZERO;
                        for (&x, &y) in cv.data().iter().zip(gt.data()) {
                            inter += x * y;
                            union += x + y - x * y;
                        }
                        let gv = g.data()[0];
                        let mut dx = Tensor::zeros(cv.shape());
                        if union > T::ZERO {
                            let u2 = union * union;
                            for (d, &y) in dx.data_mut().iter_mut().zip(gt.data()) {
                                // d(1 - I/U)/dx = (I*(1-y) - y*U) / U^2
                                *d = gv * (inter * (T::ONE - y) - y * union) / u2;
                            }
                        }
                        accum(&mut grads, *conf, dx);
                    }
                }
            }
        }
        Ok(kept)
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (d, &s) in existing.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        slot => *slot = Some(g),
    }
}

fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupNormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let ch_per_group = s.c / groups;
    let plane = s.plane();
    let m = T::from_usize(ch_per_group * plane);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let two = T::from_f64(2.0);
    let half = T::from_f64(0.5);

    for n in 0..s.n {
        for g in 0..groups {
            let mean = stats.mean[n * groups + g];
            let istd = stats.inv_std[n * groups + g];
            let start = (n * s.c + g * ch_per_group) * plane;
            let len = ch_per_group * plane;
            let xs = &x.data()[start..start + len];
            let dys = &dy.data()[start..start + len];

            // dxhat_i = dy_i * gamma_c; accumulate group sums.
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xm = T::ZERO;
            for cc in 0..ch_per_group {
                let c = g * ch_per_group + cc;
                let ga = gamma.data()[c];
                let mut dg = T::ZERO;
                let mut db = T::ZERO;
                for k in 0..plane {
                    let xv = xs[cc * plane + k];
                    let gv = dys[cc * plane + k];
                    let xhat = (xv - mean) * istd;
                    dg += gv * xhat;
                    db += gv;
                    let dxhat = gv * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xm += dxhat * (xv - mean);
                }
                dgamma.data_mut()[c] += dg;
                dbeta.data_mut()[c] += db;
            }
            let dvar = sum_dxhat_xm * (-half) * istd * istd * istd;
            let dmean = -istd * sum_dxhat;
            for cc in 0..ch_per_group {
                let c = g * ch_per_group + cc;
                let ga = gamma.data()[c];
                for k in 0..plane {
                    let xv = xs[cc * plane + k];
                    let gv = dys[cc * plane + k];
                    let dxhat = gv * ga;
                    dx.data_mut()[start + cc * plane + k] +=
                        dxhat * istd + dvar * two * (xv - mean) / m + dmean / m;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Maximum relative error between reverse-mode and central finite-difference
/// gradients of a scalar-valued graph wrt the input tensor:
/// max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn grad_check<T: Real>(
    build: impl Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
    x: &Tensor<T>,
    eps: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let xid = tape.leaf_with_grad(x.clone());
    let loss = build(&mut tape, xid)?;
    let kept = tape.backward_keep(loss, None, &[xid])?;
    let g_ad = kept
        .into_iter()
        .next()
        .flatten()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let xid = tape.leaf(t.clone());
        let loss = build(&mut tape, xid)?;
        Ok(tape.scalar_value(loss))
    };

    let mut max_err = T::ZERO;
    let floor = T::from_f64(1e-8);
    let two = T::from_f64(2.0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let g_fd = (fp - fm) / (two * eps);
        let g = g_ad.data()[i];
        let err = (g - g_fd).abs() / floor.maximum(g.abs() + g_fd.abs());
        max_err = max_err.maximum(err);
    }
    Ok(max_err)
}

/// Same check for one parameter of a parameterized graph: the AD gradient
/// accumulated into `pid` is compared against central differences of the
/// scalar loss under perturbations of that parameter.
pub fn grad_check_param<T: Real>(
    params: &Params<T>,
    pid: ParamId,
    build: impl Fn(&mut Tape<T>, &Params<T>) -> Result<NodeId>,
    eps: T,
) -> Result<T> {
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let g_ad = work.grad(pid).clone();

    let eval = |p: &Params<T>| -> Result<T> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, p)?;
        Ok(tape.scalar_value(loss))
    };

    let mut max_err = T::ZERO;
    let floor = T::from_f64(1e-8);
    let two = T::from_f64(2.0);
    let mut probe = params.clone();
    for i in 0..params.value(pid).len() {
        let orig = probe.value(pid).data()[i];
        probe.value_mut(pid).data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.value_mut(pid).data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.value_mut(pid).data_mut()[i] = orig;
        let g_fd = (fp - fm) / (two * eps);
        let g = g_ad.data()[i];
        let err = (g - g_fd).abs() / floor.maximum(g.abs() + g_fd.abs());
        max_err = max_err.maximum(err);
    }
    Ok(max_err)
}
