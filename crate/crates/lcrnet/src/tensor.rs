//! Dense 4-D tensor in (batch, channel, height, width) layout plus the
//! elementwise, normalization, and channel-manipulation primitives the rest
//! of the crate builds on.

use crate::error::{Error, Result};
use crate::real::Real;

/// Logical shape of a [`Tensor`]: batch, channels, height, width.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major tensor. `data.len() == shape.count()` always holds and all
/// entries are finite after every public operation.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T: Real> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::ZERO; shape.count()] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor { shape, data: vec![v; shape.count()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![v] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous (h*w) slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = (n * self.shape.c + c) * self.shape.plane();
        &self.data[start..start + self.shape.plane()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast every element (f32 <-> f64 conversions for checkpoints/oracles).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Elementwise activation kinds used across the network.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Evaluated through exp(-|v|) so neither branch overflows.
    let e = (-v.abs()).exp_bulk();
    if v >= T::ZERO {
        T::ONE / (T::ONE + e)
    } else {
        e / (T::ONE + e)
    }
}

#[inline]
pub fn activation_scalar<T: Real>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Silu => v * sigmoid_scalar(v),
        Activation::Sigmoid => sigmoid_scalar(v),
        Activation::Relu => v.maximum(T::ZERO),
    }
}

/// Derivative of the activation at `v`.
#[inline]
pub fn activation_grad_scalar<T: Real>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Silu => {
            let s = sigmoid_scalar(v);
            s * (T::ONE + v * (T::ONE - s))
        }
        Activation::Sigmoid => {
            let s = sigmoid_scalar(v);
            s * (T::ONE - s)
        }
        Activation::Relu => {
            if v > T::ZERO {
                T::ONE
            } else {
                T::ZERO
            }
        }
    }
}

const ELEMENTWISE_PAR_MIN: usize = 1 << 15;
const ELEMENTWISE_CHUNK: usize = 1 << 13;

/// Elementwise map, parallel over fixed-size chunks for large tensors; the
/// per-element computation is identical on both paths.
pub(crate) fn par_unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    use rayon::prelude::*;
    let mut out = Tensor::zeros(x.shape());
    if x.len() >= ELEMENTWISE_PAR_MIN {
        out.data_mut()
            .par_chunks_mut(ELEMENTWISE_CHUNK)
            .zip(x.data().par_chunks(ELEMENTWISE_CHUNK))
            .for_each(|(dst, src)| {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = f(s);
                }
            });
    } else {
        for (d, &s) in out.data_mut().iter_mut().zip(x.data()) {
            *d = f(s);
        }
    }
    out
}

pub(crate) fn par_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T + Sync,
) -> Tensor<T> {
    use rayon::prelude::*;
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = Tensor::zeros(a.shape());
    if a.len() >= ELEMENTWISE_PAR_MIN {
        out.data_mut()
            .par_chunks_mut(ELEMENTWISE_CHUNK)
            .zip(a.data().par_chunks(ELEMENTWISE_CHUNK))
            .zip(b.data().par_chunks(ELEMENTWISE_CHUNK))
            .for_each(|((dst, sa), sb)| {
                for ((d, &x), &y) in dst.iter_mut().zip(sa).zip(sb) {
                    *d = f(x, y);
                }
            });
    } else {
        for ((d, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *d = f(x, y);
        }
    }
    out
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    par_unary(x, |v| activation_scalar(kind, v))
}

/// Per-channel scale/shift and grouping for group normalization.
#[derive(Clone, Debug)]
pub struct GroupNormParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub num_groups: usize,
    pub eps: T,
}

impl<T: Real> GroupNormParams<T> {
    /// gamma = 1, beta = 0 with the default epsilon.
    pub fn identity(channels: usize, num_groups: usize) -> Self {
        GroupNormParams {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            num_groups,
            eps: T::from_f64(GROUP_NORM_EPS),
        }
    }
}

/// Default epsilon for group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Default group count for a layer with `c` channels.
pub fn default_norm_groups(c: usize) -> usize {
    c.min(4)
}

/// Per-(sample, group) mean and inverse standard deviation saved by the
/// forward pass; the backward pass reuses them.
pub struct GroupNormStats<T: Real> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn group_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    num_groups: usize,
    eps: T,
) -> Result<(Tensor<T>, GroupNormStats<T>)> {
    let s = x.shape();
    if num_groups == 0 || s.c % num_groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {} channels not divisible into {num_groups} groups",
            s.c
        )));
    }
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::Shape(format!(
            "group_norm: gamma/beta length {}/{} != channels {}",
            gamma.len(),
            beta.len(),
            s.c
        )));
    }
    let ch_per_group = s.c / num_groups;
    let group_len = ch_per_group * s.plane();
    let mut out = Tensor::zeros(s);
    let mut mean = Vec::with_capacity(s.n * num_groups);
    let mut inv_std = Vec::with_capacity(s.n * num_groups);
    for n in 0..s.n {
        for g in 0..num_groups {
            let start = (n * s.c + g * ch_per_group) * s.plane();
            let xs = &x.data()[start..start + group_len];
            // Statistics accumulated in f64 so f32 runs stay accurate.
            let mut acc = 0.0f64;
            for v in xs {
                acc += v.to_f64();
            }
            let m = acc / group_len as f64;
            let mut var = 0.0f64;
            for v in xs {
                let d = v.to_f64() - m;
                var += d * d;
            }
            var /= group_len as f64;
            let m_t = T::from_f64(m);
            let istd = T::from_f64(1.0 / (var + eps.to_f64()).sqrt());
            mean.push(m_t);
            inv_std.push(istd);
            for cc in 0..ch_per_group {
                let c = g * ch_per_group + cc;
                let ga = gamma[c];
                let be = beta[c];
                let src = &x.data()[start + cc * s.plane()..start + (cc + 1) * s.plane()];
                let dst = &mut out.data_mut()[start + cc * s.plane()..start + (cc + 1) * s.plane()];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - m_t) * istd * ga + be;
                }
            }
        }
    }
    Ok((out, GroupNormStats { mean, inv_std }))
}

pub fn group_norm<T: Real>(x: &Tensor<T>, p: &GroupNormParams<T>) -> Result<Tensor<T>> {
    group_norm_with_stats(x, &p.gamma, &p.beta, p.num_groups, p.eps).map(|(t, _)| t)
}

/// Temperature softmax over a flat logit vector: w_i = exp(l_i/tau) / sum_j exp(l_j/tau).
pub fn softmax_with_temperature<T: Real>(logits: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::ZERO) {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Usage("softmax on empty logit vector".into()));
    }
    let mut max = logits[0];
    for &l in &logits[1..] {
        max = max.maximum(l);
    }
    let mut out: Vec<T> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Split along the channel axis into `parts` equal contiguous ranges.
pub fn channel_split<T: Real>(x: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if parts == 0 || s.c % parts != 0 {
        return Err(Error::Config(format!(
            "channel_split: {} channels not divisible into {parts} parts",
            s.c
        )));
    }
    let cp = s.c / parts;
    Ok((0..parts).map(|p| channel_slice(x, p * cp, cp)).collect())
}

/// Copy channels [c0, c0+count) into a new tensor.
pub fn channel_slice<T: Real>(x: &Tensor<T>, c0: usize, count: usize) -> Tensor<T> {
    let s = x.shape();
    assert!(c0 + count <= s.c, "channel slice out of range");
    let mut out = Tensor::zeros(Shape::new(s.n, count, s.h, s.w));
    let plane = s.plane();
    for n in 0..s.n {
        let src = &x.data()[(n * s.c + c0) * plane..(n * s.c + c0 + count) * plane];
        let dst = &mut out.data_mut()[n * count * plane..(n + 1) * count * plane];
        dst.copy_from_slice(src);
    }
    out
}

/// Concatenate along the channel axis; all parts must share (n, h, w).
pub fn channel_concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let s0 = first.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::Shape(format!(
                "concat: incompatible shapes {} vs {}",
                s, s0
            )));
        }
        c_total += s.c;
    }
    let mut out = Tensor::zeros(Shape::new(s0.n, c_total, s0.h, s0.w));
    let plane = s0.plane();
    for n in 0..s0.n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape().c;
            let src = &p.data()[n * pc * plane..(n + 1) * pc * plane];
            let dst = &mut out.data_mut()
                [(n * c_total + c_off) * plane..(n * c_total + c_off + pc) * plane];
            dst.copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn silu_fixed_points() {
        assert_eq!(activation_scalar(Activation::Silu, 0.0f64), 0.0);
        let v = activation_scalar(Activation::Silu, 10.0f64);
        assert!((v - 9.999546).abs() < 1e-6, "silu(10) = {v}");
        assert_eq!(activation_scalar(Activation::Sigmoid, 0.0f64), 0.5);
    }

    #[test]
    fn activations_finite_on_wide_range() {
        for kind in [Activation::Silu, Activation::Sigmoid, Activation::Relu] {
            for i in -100..=100 {
                let v = activation_scalar::<f64>(kind, i as f64);
                assert!(v.is_finite(), "{kind:?}({i}) not finite");
                let v32 = activation_scalar::<f32>(kind, i as f32);
                assert!(v32.is_finite());
            }
        }
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let x = Tensor::full(Shape::new(2, 4, 3, 3), 5.0f64);
        let p = GroupNormParams::identity(4, 2);
        let y = group_norm(&x, &p).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_hand_case() {
        // x = [1,2,3,4] in one group, eps = 0: (x - 2.5)/sqrt(1.25)
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = GroupNormParams { gamma: vec![1.0], beta: vec![0.0], num_groups: 1, eps: 0.0 };
        let y = group_norm(&x, &p).unwrap();
        let expect = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn group_norm_beta_only() {
        let x = rand_tensor(Shape::new(1, 4, 2, 2), 3);
        let p = GroupNormParams {
            gamma: vec![0.0; 4],
            beta: vec![7.0; 4],
            num_groups: 4,
            eps: 1e-5,
        };
        let y = group_norm(&x, &p).unwrap();
        for &v in y.data() {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        let x = Tensor::zeros(Shape::new(1, 6, 2, 2));
        let p = GroupNormParams::<f64>::identity(6, 4);
        assert!(matches!(group_norm(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_standardizes_random_input() {
        // Per-group mean ~ 0 and variance ~ 1 with gamma=1, beta=0.
        for seed in 0..5u64 {
            let x = rand_tensor(Shape::new(2, 8, 6, 6), seed);
            let p = GroupNormParams::identity(8, 4);
            let y = group_norm(&x, &p).unwrap();
            let s = y.shape();
            let per = (s.c / 4) * s.plane();
            for n in 0..s.n {
                for g in 0..4 {
                    let start = (n * s.c + g * 2) * s.plane();
                    let xs = &y.data()[start..start + per];
                    let mean: f64 = xs.iter().sum::<f64>() / per as f64;
                    let var: f64 =
                        xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                    assert!(mean.abs() < 1e-6, "mean {mean}");
                    assert!((var - 1.0).abs() < 1e-4, "var {var}");
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let w = softmax_with_temperature(&[0.0f64, 0.0, 0.0, 0.0], 1.0).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let logits = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let w = softmax_with_temperature(&logits, 1.0).unwrap();
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((w[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_low_temperature_saturates() {
        let w = softmax_with_temperature(&[1.0f64, 2.0], 0.001).unwrap();
        assert!(w[1] > 0.999);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        assert!(matches!(
            softmax_with_temperature(&[1.0f64, 2.0], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0f64, 2.0], -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_entropy_monotone_in_tau_and_argmax_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let entropy = |tau: f64| -> f64 {
                let w = softmax_with_temperature(&logits, tau).unwrap();
                -w.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
            };
            let (h1, h2, h3) = (entropy(0.1), entropy(1.0), entropy(10.0));
            assert!(h1 <= h2 + 1e-9 && h2 <= h3 + 1e-9, "{h1} {h2} {h3}");
            let argmax = |v: &[f64]| {
                v.iter().enumerate().fold((0usize, f64::MIN), |acc, (i, &x)| {
                    if x > acc.1 {
                        (i, x)
                    } else {
                        acc
                    }
                })
            };
            for tau in [0.1, 1.0, 10.0] {
                let w = softmax_with_temperature(&logits, tau).unwrap();
                assert_eq!(argmax(&w).0, argmax(&logits).0);
                let total: f64 = w.iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
                assert!(w.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn split_concat_roundtrip() {
        for seed in 0..10u64 {
            let x = rand_tensor(Shape::new(2, 8, 3, 5), seed);
            for parts in [1, 2, 4, 8] {
                let pieces = channel_split(&x, parts).unwrap();
                assert_eq!(pieces.len(), parts);
                let refs: Vec<&Tensor<f64>> = pieces.iter().collect();
                let back = channel_concat(&refs).unwrap();
                assert_eq!(back, x, "roundtrip failed for parts={parts}");
            }
        }
    }

    #[test]
    fn split_indexing() {
        let x = Tensor::from_fn(Shape::new(1, 6, 1, 1), |_, c, _, _| c as f64);
        let pieces = channel_split(&x, 3).unwrap();
        assert_eq!(pieces[0].data(), &[0.0, 1.0]);
        assert_eq!(pieces[1].data(), &[2.0, 3.0]);
        assert_eq!(pieces[2].data(), &[4.0, 5.0]);
    }

    #[test]
    fn split_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 5, 2, 2));
        assert!(matches!(channel_split(&x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let b = Tensor::<f64>::full(Shape::new(1, 3, 2, 2), 2.0);
        let y = channel_concat(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2));
        let single = channel_concat(&[&a]).unwrap();
        assert_eq!(single, a);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(channel_concat(&[&a, &bad]), Err(Error::Shape(_))));
    }
}
