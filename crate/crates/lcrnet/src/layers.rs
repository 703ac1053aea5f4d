//! Parameterized layer handles: thin structs holding [`ParamId`]s plus the
//! shared fan-in-scaled uniform initializer. Layer `forward` methods record
//! onto a [`Tape`]; the same graph code backs the pure module-level ops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, Params, Tape};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Uniform(-b, b) with b = 1/sqrt(fan_in). Draws happen in f64 so the same
/// seed yields the same model in both precisions.
pub fn uniform_fan_in<T: Real>(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut data = Vec::with_capacity(shape.count());
    for _ in 0..shape.count() {
        data.push(T::from_f64(rng.gen_range(-bound..bound)));
    }
    Tensor::new(shape, data).expect("shape/data agree")
}

/// A convolution layer whose weights live in a [`Params`] store.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvLayer {
    /// Register a freshly initialized convolution. `bias` follows the crate
    /// convention: pointwise and dense convs carry one, depthwise convs do not.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_c: usize,
        in_c_per_group: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c_per_group * k * k;
        let w = params.add(
            format!("{name}.w"),
            uniform_fan_in(rng, Shape::new(out_c, in_c_per_group, k, k), fan_in),
        );
        let b = if bias {
            Some(params.add(
                format!("{name}.b"),
                uniform_fan_in(rng, Shape::new(1, out_c, 1, 1), fan_in),
            ))
        } else {
            None
        };
        ConvLayer { w, b, stride, dilation, groups }
    }

    pub fn dense<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self::init(params, rng, name, out_c, in_c, k, stride, 1, 1, true)
    }

    pub fn pointwise<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        Self::init(params, rng, name, out_c, in_c, 1, 1, 1, 1, true)
    }

    pub fn depthwise<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        Self::init(params, rng, name, c, 1, k, 1, dilation, c, false)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(params, self.w);
        let b = self.b.map(|bid| tape.param(params, bid));
        tape.conv2d(x, w, b, self.stride, self.dilation, self.groups)
    }

    /// Bias-free weight count (the FLOP model's per-pixel cost).
    pub fn weight_count<T: Real>(&self, params: &Params<T>) -> usize {
        params.value(self.w).len()
    }
}

/// Group normalization layer with trainable gamma/beta.
#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            Tensor::full(Shape::new(1, channels, 1, 1), T::ONE),
        );
        let beta =
            params.add(format!("{name}.beta"), Tensor::zeros(Shape::new(1, channels, 1, 1)));
        GroupNormLayer { gamma, beta, groups, eps }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.group_norm(x, gamma, beta, self.groups, T::from_f64(self.eps))
    }
}
