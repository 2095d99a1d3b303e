//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as an ordered list of op nodes; node
//! inputs always precede the node, so walking the list backwards visits each
//! node exactly once with its output gradient fully accumulated. Parameters
//! enter the tape as leaves tagged with their [`ParamId`]; `backward` writes
//! their gradients back into the [`ParamStore`].
//!
//! Tapes are not shared between concurrent passes. In non-recording mode no
//! backward context (softmax probabilities, dropout masks) is saved, and
//! [`Tape::keep_only`] lets long forwards drop intermediate values.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::Axis;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims, Labels, Real, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

enum Back<T> {
    Leaf,
    Add(Val, Val),
    Mul(Val, Val),
    Scale(Val, T),
    SumAll(Val),
    Conv3d { x: Val, w: Val, b: Option<Val>, stride: usize, padding: usize, groups: usize },
    ConvT3d { x: Val, w: Val, stride: usize },
    LayerNorm { x: Val, gamma: Val, beta: Val, eps: f64 },
    Gelu(Val),
    Sigmoid(Val),
    GlobalAvgPool(Val),
    ChannelPool { x: Val, argmax: Vec<u32> },
    BcMulChannel { target: Val, gate: Val },
    BcMulSpatial { target: Val, gate: Val },
    NarrowChannels { x: Val, start: usize },
    ConcatChannels { xs: Vec<Val> },
    AxialAttn { q: Val, k: Val, v: Val, axis: Axis, heads: usize, probs: Vec<T> },
    Dropout { x: Val, mask: Vec<bool>, scale: T },
    DiceCe { logits: Val, grad: Tensor<T> },
}

impl<T> Back<T> {
    fn name(&self) -> &'static str {
        match self {
            Back::Leaf => "leaf",
            Back::Add(..) => "add",
            Back::Mul(..) => "mul",
            Back::Scale(..) => "scale",
            Back::SumAll(..) => "sum_all",
            Back::Conv3d { .. } => "conv3d",
            Back::ConvT3d { .. } => "conv3d_transposed",
            Back::LayerNorm { .. } => "layer_norm",
            Back::Gelu(..) => "gelu",
            Back::Sigmoid(..) => "sigmoid",
            Back::GlobalAvgPool(..) => "global_avg_pool",
            Back::ChannelPool { .. } => "channel_pool",
            Back::BcMulChannel { .. } => "broadcast_mul_channel",
            Back::BcMulSpatial { .. } => "broadcast_mul_spatial",
            Back::NarrowChannels { .. } => "narrow_channels",
            Back::ConcatChannels { .. } => "concat_channels",
            Back::AxialAttn { .. } => "axial_attention",
            Back::Dropout { .. } => "dropout",
            Back::DiceCe { .. } => "dice_ce_loss",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    param: Option<ParamId>,
    back: Back<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recording: bool,
    train: bool,
    check_finite: bool,
    rng: ChaCha8Rng,
    param_cache: HashMap<usize, Val>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            train: false,
            check_finite: cfg!(debug_assertions),
            rng: ChaCha8Rng::seed_from_u64(0),
            param_cache: HashMap::new(),
        }
    }

    /// A tape that keeps no backward context; used for pure forward passes.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    /// Enable dropout and seed its mask stream.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.train = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, param: Option<ParamId>, back: Back<T>) -> Result<Val> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: back.name() });
        }
        self.nodes.push(Node { value: Arc::new(value), param, back });
        Ok(Val(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Val> {
        self.push(value, None, Back::Leaf)
    }

    /// Bring a parameter onto the tape (cached per parameter per pass).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Val> {
        if let Some(&v) = self.param_cache.get(&id.0) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Some(id), Back::Leaf)?;
        self.param_cache.insert(id.0, v);
        Ok(v)
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Val) -> Tensor<T> {
        (*self.nodes[v.0].value).clone()
    }

    pub fn dims(&self, v: Val) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of a leaf after `backward` (parameters and inputs).
    pub fn grad(&self, v: Val) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- ops ----

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.push(y, None, Back::Add(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let y = ops::mul(self.value(a), self.value(b))?;
        self.push(y, None, Back::Mul(a, b))
    }

    pub fn scale(&mut self, a: Val, s: T) -> Result<Val> {
        let y = ops::scale(self.value(a), s);
        self.push(y, None, Back::Scale(a, s))
    }

    pub fn sum_all(&mut self, a: Val) -> Result<Val> {
        let y = ops::sum_all(self.value(a));
        self.push(y, None, Back::SumAll(a))
    }

    pub fn conv3d(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Val> {
        let y = ops::conv3d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        self.push(y, None, Back::Conv3d { x, w, b, stride, padding, groups })
    }

    pub fn conv3d_transposed(&mut self, x: Val, w: Val, stride: usize) -> Result<Val> {
        let y = ops::conv3d_transposed(self.value(x), self.value(w), stride)?;
        self.push(y, None, Back::ConvT3d { x, w, stride })
    }

    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let y = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(y, None, Back::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: Val) -> Result<Val> {
        let y = ops::gelu(self.value(x));
        self.push(y, None, Back::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let y = ops::sigmoid(self.value(x));
        self.push(y, None, Back::Sigmoid(x))
    }

    pub fn global_avg_pool(&mut self, x: Val) -> Result<Val> {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, None, Back::GlobalAvgPool(x))
    }

    pub fn channel_pool(&mut self, x: Val) -> Result<Val> {
        let (y, argmax) = ops::channel_pool(self.value(x));
        let argmax = if self.recording { argmax } else { Vec::new() };
        self.push(y, None, Back::ChannelPool { x, argmax })
    }

    pub fn broadcast_mul_channel(&mut self, target: Val, gate: Val) -> Result<Val> {
        let y = ops::broadcast_mul_channel(self.value(target), self.value(gate))?;
        self.push(y, None, Back::BcMulChannel { target, gate })
    }

    pub fn broadcast_mul_spatial(&mut self, target: Val, gate: Val) -> Result<Val> {
        let y = ops::broadcast_mul_spatial(self.value(target), self.value(gate))?;
        self.push(y, None, Back::BcMulSpatial { target, gate })
    }

    pub fn narrow_channels(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let y = ops::narrow_channels(self.value(x), start, len)?;
        self.push(y, None, Back::NarrowChannels { x, start })
    }

    pub fn concat_channels(&mut self, xs: &[Val]) -> Result<Val> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&tensors)?;
        self.push(y, None, Back::ConcatChannels { xs: xs.to_vec() })
    }

    pub fn axial_attention(&mut self, q: Val, k: Val, v: Val, axis: Axis, heads: usize) -> Result<Val> {
        let qh = ops::split_heads(self.value(q), heads)?;
        let kh = ops::split_heads(self.value(k), heads)?;
        let vh = ops::split_heads(self.value(v), heads)?;
        let (out, probs) = ops::axial_attention(&qh, &kh, &vh, axis, self.recording)?;
        let y = ops::merge_heads(out);
        self.push(
            y,
            None,
            Back::AxialAttn { q, k, v, axis, heads, probs: probs.unwrap_or_default() },
        )
    }

    /// Inverted dropout: identity unless the tape is in train mode with p > 0.
    pub fn dropout(&mut self, x: Val, p: f64) -> Result<Val> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::msg(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let scale = T::from_f64(1.0 / keep);
        let xt = self.nodes[x.0].value.clone();
        let mask: Vec<bool> = (0..xt.dims().count()).map(|_| self.rng.gen::<f64>() < keep).collect();
        let mut y = Tensor::zeros(xt.dims());
        for ((o, &xi), &m) in y.data_mut().iter_mut().zip(xt.data()).zip(&mask) {
            if m {
                *o = xi * scale;
            }
        }
        let mask = if self.recording { mask } else { Vec::new() };
        self.push(y, None, Back::Dropout { x, mask, scale })
    }

    pub fn dice_ce_loss(&mut self, logits: Val, labels: &Labels) -> Result<Val> {
        let (total, _, _, grad) = ops::dice_ce_loss(self.value(logits), labels)?;
        let grad = if self.recording { grad } else { Tensor::scalar(T::zero()) };
        self.push(Tensor::scalar(total), None, Back::DiceCe { logits, grad })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Fills leaf gradients (readable via
    /// [`Tape::grad`]) and accumulates parameter gradients into `store`.
    pub fn backward(&mut self, loss: Val, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_leaves(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, self.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    /// Reverse sweep without a parameter store; gradients stay on the tape.
    pub fn backward_leaves(&mut self, loss: Val) -> Result<()> {
        let n = self.nodes.len();
        let loss_dims = self.nodes[loss.0].value.dims();
        if loss_dims.count() != 1 {
            return Err(Error::LossNotScalar { dims: loss_dims });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            if grads[i].is_none() || matches!(self.nodes[i].back, Back::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.step_back(i, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn step_back(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Val, delta: Tensor<T>) {
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        match &self.nodes[i].back {
            Back::Leaf => {}
            Back::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Back::Mul(a, b) => {
                acc(grads, *a, ops::mul(g, self.value(*b))?);
                acc(grads, *b, ops::mul(g, self.value(*a))?);
            }
            Back::Scale(a, s) => acc(grads, *a, ops::scale(g, *s)),
            Back::SumAll(a) => {
                acc(grads, *a, Tensor::full(self.value(*a).dims(), g.scalar_value()));
            }
            Back::Conv3d { x, w, b, stride, padding, groups } => {
                let (dx, dw, db) = ops::conv::conv3d_grad(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    *stride,
                    *padding,
                    *groups,
                    g,
                )?;
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    acc(grads, *b, db);
                }
            }
            Back::ConvT3d { x, w, stride } => {
                let (dx, dw) =
                    ops::conv::conv3d_transposed_grad(self.value(*x), self.value(*w), *stride, g)?;
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Back::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) =
                    ops::norm::layer_norm_grad(self.value(*x), self.value(*gamma), *eps, g);
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Back::Gelu(x) => acc(grads, *x, ops::gelu_grad(self.value(*x), g)),
            Back::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                acc(grads, *x, ops::sigmoid_grad_from_output(y, g));
            }
            Back::GlobalAvgPool(x) => {
                acc(grads, *x, ops::pool::global_avg_pool_grad(self.value(*x).dims(), g));
            }
            Back::ChannelPool { x, argmax } => {
                acc(grads, *x, ops::pool::channel_pool_grad(self.value(*x).dims(), argmax, g));
            }
            Back::BcMulChannel { target, gate } => {
                let (dt, dg) =
                    ops::broadcast_mul_channel_grad(self.value(*target), self.value(*gate), g);
                acc(grads, *target, dt);
                acc(grads, *gate, dg);
            }
            Back::BcMulSpatial { target, gate } => {
                let (dt, dg) =
                    ops::broadcast_mul_spatial_grad(self.value(*target), self.value(*gate), g);
                acc(grads, *target, dt);
                acc(grads, *gate, dg);
            }
            Back::NarrowChannels { x, start } => {
                acc(grads, *x, ops::narrow_channels_grad(g, self.value(*x).dims(), *start));
            }
            Back::ConcatChannels { xs } => {
                let mut off = 0;
                for &xv in xs {
                    let c = self.value(xv).dims().c;
                    acc(grads, xv, ops::narrow_channels(g, off, c)?);
                    off += c;
                }
            }
            Back::AxialAttn { q, k, v, axis, heads, probs } => {
                debug_assert!(!probs.is_empty(), "axial attention backward needs a recording tape");
                let (dq, dk, dv) = ops::attn::axial_attention_grad(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *axis,
                    *heads,
                    probs,
                    g,
                );
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Back::Dropout { x, mask, scale } => {
                let mut dx = g.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *v = if m { *v * *scale } else { T::zero() };
                }
                acc(grads, *x, dx);
            }
            Back::DiceCe { logits, grad } => {
                acc(grads, *logits, ops::scale(grad, g.scalar_value()));
            }
        }
        Ok(())
    }

    // ---- inference-mode memory compaction ----

    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node at or above `mark`, re-inserting the values of `keep`
    /// as fresh leaves. Only valid on non-recording tapes.
    pub fn keep_only(&mut self, mark: usize, keep: &[Val]) -> Result<Vec<Val>> {
        assert!(!self.recording, "keep_only would sever gradient flow on a recording tape");
        let kept: Vec<Arc<Tensor<T>>> =
            keep.iter().map(|&v| self.nodes[v.0].value.clone()).collect();
        self.nodes.truncate(mark);
        self.param_cache.retain(|_, v| v.0 < mark);
        let mut out = Vec::with_capacity(kept.len());
        for (v, &orig) in kept.into_iter().zip(keep) {
            if orig.0 < mark {
                out.push(orig);
            } else {
                self.nodes.push(Node { value: v, param: None, back: Back::Leaf });
                out.push(Val(self.nodes.len() - 1));
            }
        }
        Ok(out)
    }
}
