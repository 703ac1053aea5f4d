//! Convolution, pooling, and resampling kernels, plus the brute-force
//! convolution oracle used by equivalence tests.
//!
//! All convolutions are cross-correlations (no kernel flip) with zero-fill
//! "same" padding, so stride-1 output resolution equals the input and
//! stride-s output is ceil(in/s). Kernels must have odd spatial dims.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// A convolution layer description: weights are (out_ch, in_ch_per_group, kh, kw).
#[derive(Clone, Debug)]
pub struct ConvKernel<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let k = ConvKernel { weights, bias, stride, dilation, groups };
        k.validate()?;
        Ok(k)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c * self.groups
    }

    fn validate(&self) -> Result<()> {
        let w = self.weights.shape();
        if self.stride < 1 || self.dilation < 1 || self.groups < 1 {
            return Err(Error::Config(format!(
                "conv stride/dilation/groups must be >= 1, got {}/{}/{}",
                self.stride, self.dilation, self.groups
            )));
        }
        if w.h % 2 == 0 || w.w % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel dims must be odd for same padding, got {}x{}",
                w.h, w.w
            )));
        }
        if w.n % self.groups != 0 {
            return Err(Error::Config(format!(
                "out channels {} not divisible by groups {}",
                w.n, self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != w.n {
                return Err(Error::Shape(format!(
                    "bias length {} != out channels {}",
                    b.len(),
                    w.n
                )));
            }
        }
        Ok(())
    }
}

/// Work threshold below which the parallel paths fall back to a sequential
/// loop. Both paths compute every output element with the same accumulation
/// order, so results are bit-identical either way.
const PAR_MIN_WORK: usize = 1 << 16;

fn run_planes<T, F>(out: &mut [T], plane: usize, work_per_elem: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let planes = out.len() / plane.max(1);
    if planes > 1 && out.len() * work_per_elem.max(1) >= PAR_MIN_WORK {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            f(i, chunk);
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<()> {
    let ws = w.shape();
    if stride < 1 || dilation < 1 || groups < 1 {
        return Err(Error::Config("conv stride/dilation/groups must be >= 1".into()));
    }
    if ws.h % 2 == 0 || ws.w % 2 == 0 {
        return Err(Error::Config(format!("conv kernel dims must be odd, got {}x{}", ws.h, ws.w)));
    }
    if ws.n % groups != 0 {
        return Err(Error::Config(format!(
            "out channels {} not divisible by groups {}",
            ws.n, groups
        )));
    }
    if x.shape().c != ws.c * groups {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {} ({} per group x {} groups)",
            x.shape().c,
            ws.c * groups,
            ws.c,
            groups
        )));
    }
    Ok(())
}

/// Cross-correlation with zero same padding. Shared by the public op and the
/// autodiff node.
pub(crate) fn conv2d_raw<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, stride, dilation, groups)?;
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (out_h, out_w) = (ceil_div(xs.h, stride), ceil_div(xs.w, stride));
    let pad_h = ((kh - 1) * dilation) / 2;
    let pad_w = ((kw - 1) * dilation) / 2;
    let oc_total = ws.n;
    let ocg = oc_total / groups;
    let icg = ws.c;

    let mut out = Tensor::zeros(Shape::new(xs.n, oc_total, out_h, out_w));
    let out_plane = out_h * out_w;
    let x_data = x.data();
    let w_data = w.data();
    let work = icg * kh * kw;

    run_planes(out.data_mut(), out_plane, work, |pi, out_plane_data| {
        let n = pi / oc_total;
        let oc = pi % oc_total;
        let g = oc / ocg;
        if let Some(b) = bias {
            out_plane_data.fill(b[oc]);
        }
        for ic_in_g in 0..icg {
            let ic = g * icg + ic_in_g;
            let x_plane = &x_data[(n * xs.c + ic) * xs.plane()..(n * xs.c + ic + 1) * xs.plane()];
            let w_base = ((oc * icg + ic_in_g) * kh) * kw;
            if stride == 1 {
                for ky in 0..kh {
                    let dy = (ky * dilation) as isize - pad_h as isize;
                    for kx in 0..kw {
                        let wv = w_data[w_base + ky * kw + kx];
                        let dx = (kx * dilation) as isize - pad_w as isize;
                        for oy in 0..out_h {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((xs.w as isize - dx).min(out_w as isize)).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            let o_row = &mut out_plane_data[oy * out_w + ox0..oy * out_w + ox1];
                            let x_seg = &x_row[(ox0 as isize + dx) as usize
                                ..(ox1 as isize + dx) as usize];
                            for (o, &xv) in o_row.iter_mut().zip(x_seg) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            } else {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = T::ZERO;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix =
                                    (ox * stride + kx * dilation) as isize - pad_w as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w_data[w_base + ky * kw + kx]
                                    * x_plane[iy as usize * xs.w + ix as usize];
                            }
                        }
                        out_plane_data[oy * out_w + ox] += acc;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of the convolution output wrt its input (gather form: every
/// input element is produced by exactly one task).
pub(crate) fn conv2d_grad_x<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<T> {
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let pad_h = ((kh - 1) * dilation) / 2;
    let pad_w = ((kw - 1) * dilation) / 2;
    let dys = dy.shape();
    let oc_total = ws.n;
    let ocg = oc_total / groups;
    let icg = ws.c;

    let mut dx = Tensor::zeros(x_shape);
    let plane = x_shape.plane();
    let dy_data = dy.data();
    let w_data = w.data();
    let work = ocg * kh * kw;

    run_planes(dx.data_mut(), plane, work, |pi, dx_plane| {
        let n = pi / x_shape.c;
        let ic = pi % x_shape.c;
        let g = ic / icg;
        let ic_in_g = ic % icg;
        for oc_in_g in 0..ocg {
            let oc = g * ocg + oc_in_g;
            let dy_plane =
                &dy_data[(n * oc_total + oc) * dys.plane()..(n * oc_total + oc + 1) * dys.plane()];
            let w_base = ((oc * icg + ic_in_g) * kh) * kw;
            if stride == 1 {
                for ky in 0..kh {
                    let dyo = (ky * dilation) as isize - pad_h as isize;
                    for kx in 0..kw {
                        let wv = w_data[w_base + ky * kw + kx];
                        let dxo = (kx * dilation) as isize - pad_w as isize;
                        // x[iy, ix] feeds out[iy - dyo, ix - dxo]
                        for iy in 0..x_shape.h {
                            let oy = iy as isize - dyo;
                            if oy < 0 || oy >= dys.h as isize {
                                continue;
                            }
                            let ix0 = dxo.max(0) as usize;
                            let ix1 =
                                ((dys.w as isize + dxo).min(x_shape.w as isize)).max(0) as usize;
                            if ix0 >= ix1 {
                                continue;
                            }
                            let dy_row = &dy_plane[oy as usize * dys.w..(oy as usize + 1) * dys.w];
                            let dx_row = &mut dx_plane[iy * x_shape.w + ix0..iy * x_shape.w + ix1];
                            let dy_seg = &dy_row[(ix0 as isize - dxo) as usize
                                ..(ix1 as isize - dxo) as usize];
                            for (d, &gv) in dx_row.iter_mut().zip(dy_seg) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            } else {
                for iy in 0..x_shape.h {
                    for ix in 0..x_shape.w {
                        let mut acc = T::ZERO;
                        for ky in 0..kh {
                            let t = iy as isize + pad_h as isize - (ky * dilation) as isize;
                            if t < 0 || t % stride as isize != 0 {
                                continue;
                            }
                            let oy = (t / stride as isize) as usize;
                            if oy >= dys.h {
                                continue;
                            }
                            for kx in 0..kw {
                                let u = ix as isize + pad_w as isize - (kx * dilation) as isize;
                                if u < 0 || u % stride as isize != 0 {
                                    continue;
                                }
                                let ox = (u / stride as isize) as usize;
                                if ox >= dys.w {
                                    continue;
                                }
                                acc += w_data[w_base + ky * kw + kx] * dy_plane[oy * dys.w + ox];
                            }
                        }
                        dx_plane[iy * x_shape.w + ix] += acc;
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of the convolution output wrt the kernel weights.
pub(crate) fn conv2d_grad_w<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w_shape: Shape,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<T> {
    let (kh, kw) = (w_shape.h, w_shape.w);
    let pad_h = ((kh - 1) * dilation) / 2;
    let pad_w = ((kw - 1) * dilation) / 2;
    let xs = x.shape();
    let dys = dy.shape();
    let oc_total = w_shape.n;
    let ocg = oc_total / groups;
    let icg = w_shape.c;

    let mut dw = Tensor::zeros(w_shape);
    let per_oc = icg * kh * kw;
    let x_data = x.data();
    let dy_data = dy.data();
    let work = xs.n * dys.plane();

    run_planes(dw.data_mut(), per_oc, work, |oc, dw_oc| {
        let g = oc / ocg;
        for ic_in_g in 0..icg {
            let ic = g * icg + ic_in_g;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::ZERO;
                    for n in 0..xs.n {
                        let x_plane = &x_data
                            [(n * xs.c + ic) * xs.plane()..(n * xs.c + ic + 1) * xs.plane()];
                        let dy_plane = &dy_data[(n * oc_total + oc) * dys.plane()
                            ..(n * oc_total + oc + 1) * dys.plane()];
                        for oy in 0..dys.h {
                            let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            let dy_row = &dy_plane[oy * dys.w..(oy + 1) * dys.w];
                            if stride == 1 {
                                let dxo = (kx * dilation) as isize - pad_w as isize;
                                let ox0 = (-dxo).max(0) as usize;
                                let ox1 =
                                    ((xs.w as isize - dxo).min(dys.w as isize)).max(0) as usize;
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let x_seg = &x_row[(ox0 as isize + dxo) as usize
                                    ..(ox1 as isize + dxo) as usize];
                                for (&gv, &xv) in dy_row[ox0..ox1].iter().zip(x_seg) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in 0..dys.w {
                                    let ix =
                                        (ox * stride + kx * dilation) as isize - pad_w as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += dy_row[ox] * x_row[ix as usize];
                                }
                            }
                        }
                    }
                    dw_oc[(ic_in_g * kh + ky) * kw + kx] += acc;
                }
            }
        }
    });
    dw
}

pub(crate) fn conv2d_grad_b<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let s = dy.shape();
    let mut db = vec![T::ZERO; s.c];
    for n in 0..s.n {
        for (c, db_c) in db.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in dy.plane(n, c) {
                acc += v;
            }
            *db_c += acc;
        }
    }
    db
}

/// Standard cross-correlation with zero same padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &k.weights, k.bias.as_deref(), k.stride, k.dilation, k.groups)
}

fn pool_window<T: Real>(x: &Tensor<T>, th: usize, tw: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if th == 0 || tw == 0 || s.h % th != 0 || s.w % tw != 0 {
        return Err(Error::Resample(format!(
            "maxpool target {th}x{tw} does not divide input {}x{}",
            s.h, s.w
        )));
    }
    Ok((s.h / th, s.w / tw))
}

/// Non-overlapping window max; also returns the flat input index of each
/// window's (first, row-major) maximum for the backward pass.
pub(crate) fn maxpool_to_with_argmax<T: Real>(
    x: &Tensor<T>,
    th: usize,
    tw: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (wh, ww) = pool_window(x, th, tw)?;
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, th, tw));
    let mut argmax = vec![0u32; out.len()];
    let x_data = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..th {
                for ox in 0..tw {
                    let mut best_idx = base + (oy * wh) * s.w + ox * ww;
                    let mut best = x_data[best_idx];
                    for iy in oy * wh..(oy + 1) * wh {
                        for ix in ox * ww..(ox + 1) * ww {
                            let idx = base + iy * s.w + ix;
                            if x_data[idx] > best {
                                best = x_data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = out.idx(n, c, oy, ox);
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Maxpool the input down to exactly (target_h, target_w); the target must
/// divide the input resolution.
pub fn maxpool_to<T: Real>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    maxpool_to_with_argmax(x, target_h, target_w).map(|(t, _)| t)
}

/// Nearest-neighbor upsample to exactly (target_h, target_w); the input must
/// divide the target resolution.
pub fn upsample_nearest_to<T: Real>(
    x: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if target_h == 0 || target_w == 0 || target_h % s.h != 0 || target_w % s.w != 0 {
        return Err(Error::Resample(format!(
            "upsample target {target_h}x{target_w} is not an integer multiple of input {}x{}",
            s.h, s.w
        )));
    }
    let (fh, fw) = (target_h / s.h, target_w / s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, target_h, target_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..target_h {
                let src_row = &src[(oy / fh) * s.w..(oy / fh + 1) * s.w];
                let dst_row = &mut dst[oy * target_w..(oy + 1) * target_w];
                for (ox, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[ox / fw];
                }
            }
        }
    }
    Ok(out)
}

/// Accumulate upsample output gradients back onto the input grid.
pub(crate) fn upsample_grad_x<T: Real>(dy: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let s = dy.shape();
    let (fh, fw) = (s.h / x_shape.h, s.w / x_shape.w);
    let mut dx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for iy in 0..x_shape.h {
                for ix in 0..x_shape.w {
                    let mut acc = T::ZERO;
                    for oy in iy * fh..(iy + 1) * fh {
                        for ox in ix * fw..(ix + 1) * fw {
                            acc += src[oy * s.w + ox];
                        }
                    }
                    dst[iy * x_shape.w + ix] += acc;
                }
            }
        }
    }
    dx
}

/// Per-channel spatial mean, shape (n, c, 1, 1).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let inv = T::ONE / T::from_usize(s.plane());
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = T::ZERO;
            for &v in x.plane(n, c) {
                acc += v;
            }
            let i = out.idx(n, c, 0, 0);
            out.data_mut()[i] = acc * inv;
        }
    }
    out
}

/// Small square odd-sized 2-D kernel for the oracle and kernel-composition
/// routines.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d<T: Real> {
    size: usize,
    data: Vec<T>,
}

impl<T: Real> Kernel2d<T> {
    pub fn new(size: usize, data: Vec<T>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("oracle kernel size must be odd, got {size}")));
        }
        if data.len() != size * size {
            return Err(Error::Shape(format!(
                "kernel data length {} != {size}x{size}",
                data.len()
            )));
        }
        Ok(Kernel2d { size, data })
    }

    /// Dirac kernel: 1 at the center, 0 elsewhere.
    pub fn delta(size: usize) -> Self {
        let mut data = vec![T::ZERO; size * size];
        data[(size / 2) * size + size / 2] = T::ONE;
        Kernel2d { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.size + x]
    }
}

/// Direct nested-loop depthwise cross-correlation with zero padding. The
/// same kernel is applied to every channel. Reference implementation only;
/// deliberately naive and kept independent of `conv2d`.
pub fn dense_conv_oracle<T: Real>(x: &Tensor<T>, kernel: &Kernel2d<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = T::ZERO;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - r;
                            let ix = xx as isize + kx as isize - r;
                            if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                                acc += kernel.at(ky, kx) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, c, y, xx, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Same oracle with a dilated kernel (used by the decomposition tests).
pub fn dense_conv_oracle_dilated<T: Real>(
    x: &Tensor<T>,
    kernel: &Kernel2d<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let s = x.shape();
    let k = kernel.size();
    let r = ((k - 1) * dilation / 2) as isize;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = T::ZERO;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + (ky * dilation) as isize - r;
                            let ix = xx as isize + (kx * dilation) as isize - r;
                            if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                                acc += kernel.at(ky, kx) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, c, y, xx, acc);
                }
            }
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
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn depthwise_kernel(c: usize, k: usize, f: impl Fn(usize, usize, usize) -> f64) -> ConvKernel<f64> {
        let w = Tensor::from_fn(Shape::new(c, 1, k, k), |oc, _, y, x| f(oc, y, x));
        ConvKernel::new(w, None, 1, 1, c).unwrap()
    }

    #[test]
    fn identity_depthwise_kernel() {
        let x = rand_tensor(Shape::new(2, 3, 5, 7), 0);
        let k = depthwise_kernel(3, 3, |_, y, x| if y == 1 && x == 1 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_depthwise_on_constant() {
        let c = 2.5;
        let x = Tensor::full(Shape::new(1, 1, 6, 6), c);
        let k = depthwise_kernel(1, 3, |_, _, _| 1.0);
        let y = conv2d(&x, &k).unwrap();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.at(0, 0, yy, xx) - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 window
        assert!((y.at(0, 0, 0, 0) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn pointwise_channel_sum() {
        let x = rand_tensor(Shape::new(1, 2, 4, 4), 1);
        let w = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let k = ConvKernel::new(w, None, 1, 1, 1).unwrap();
        let y = conv2d(&x, &k).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let expect = x.at(0, 0, yy, xx) + x.at(0, 1, yy, xx);
                assert!((y.at(0, 0, yy, xx) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f64>::zeros(Shape::new(4, 2, 3, 3));
        let k = ConvKernel::new(w, None, 1, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &k), Err(Error::Shape(_))));
        let we = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(ConvKernel::new(we, None, 1, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn stride1_preserves_dims_any_odd_kernel_and_dilation() {
        let x = rand_tensor(Shape::new(1, 2, 9, 11), 2);
        for k in [1usize, 3, 5, 7] {
            for d in [1usize, 2, 3] {
                let w = rand_tensor(Shape::new(2, 1, k, k), 3);
                let kern = ConvKernel::new(w, None, 1, d, 2).unwrap();
                let y = conv2d(&x, &kern).unwrap();
                assert_eq!(y.shape(), x.shape(), "k={k} d={d}");
            }
        }
    }

    #[test]
    fn stride2_output_is_ceil() {
        for h in [8usize, 9, 15, 16] {
            let x = rand_tensor(Shape::new(1, 1, h, h), 4);
            let w = rand_tensor(Shape::new(1, 1, 3, 3), 5);
            let k = ConvKernel::new(w, None, 2, 1, 1).unwrap();
            let y = conv2d(&x, &k).unwrap();
            assert_eq!(y.shape().h, (h + 1) / 2);
        }
    }

    #[test]
    fn conv_linearity() {
        let x = rand_tensor(Shape::new(1, 2, 6, 6), 6);
        let y = rand_tensor(Shape::new(1, 2, 6, 6), 7);
        let w = rand_tensor(Shape::new(3, 2, 3, 3), 8);
        let k = ConvKernel::new(w, None, 1, 1, 1).unwrap();
        let (a, b) = (0.7, -1.3);
        let lhs_in = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = conv2d(&lhs_in, &k).unwrap();
        let cx = conv2d(&x, &k).unwrap();
        let cy = conv2d(&y, &k).unwrap();
        let rhs = cx.zip_map(&cy, |u, v| a * u + b * v).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            let denom = l.abs().max(r.abs()).max(1e-9);
            assert!((l - r).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn conv_matches_oracle_depthwise_with_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let d = [1usize, 2, 3][case % 3];
            let x = rand_tensor(Shape::new(1, 3, 9, 9), 100 + case as u64);
            let kdata: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kern = Kernel2d::new(3, kdata.clone()).unwrap();
            let w = Tensor::from_fn(Shape::new(3, 1, 3, 3), |_, _, y, xx| kdata[y * 3 + xx]);
            let k = ConvKernel::new(w, None, 1, d, 3).unwrap();
            let fast = conv2d(&x, &k).unwrap();
            let slow = dense_conv_oracle_dilated(&x, &kern, d).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_identity_and_zero() {
        let x = rand_tensor(Shape::new(1, 2, 5, 5), 9);
        let id = Kernel2d::delta(3);
        assert_eq!(dense_conv_oracle(&x, &id).unwrap(), x);
        let zero = Kernel2d::new(3, vec![0.0; 9]).unwrap();
        let y = dense_conv_oracle(&x, &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(Kernel2d::<f64>::new(4, vec![0.0; 16]), Err(Error::Config(_))));
    }

    #[test]
    fn maxpool_hand_case() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, xx| (y * 4 + xx) as f64);
        let y = maxpool_to(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_identity_and_constant() {
        let x = rand_tensor(Shape::new(1, 2, 4, 4), 10);
        assert_eq!(maxpool_to(&x, 4, 4).unwrap(), x);
        let c = Tensor::full(Shape::new(1, 1, 8, 8), 3.25);
        let y = maxpool_to(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
        assert!(matches!(maxpool_to(&x, 3, 3), Err(Error::Resample(_))));
    }

    #[test]
    fn maxpool_never_exceeds_input_max() {
        for seed in 0..10u64 {
            let x = rand_tensor(Shape::new(2, 2, 8, 8), 20 + seed);
            let max_in = x.data().iter().cloned().fold(f64::MIN, f64::max);
            let y = maxpool_to(&x, 2, 4).unwrap();
            for &v in y.data() {
                assert!(v <= max_in);
            }
        }
    }

    #[test]
    fn upsample_blocks_and_identity() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, xx| (y * 2 + xx) as f64);
        let y = upsample_nearest_to(&x, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                assert_eq!(y.at(0, 0, oy, ox), x.at(0, 0, oy / 2, ox / 2));
            }
        }
        assert_eq!(upsample_nearest_to(&x, 2, 2).unwrap(), x);
        assert!(matches!(upsample_nearest_to(&x, 3, 3), Err(Error::Resample(_))));
    }

    #[test]
    fn upsample_preserves_distinct_values_and_pool_roundtrip_on_constant() {
        let x = rand_tensor(Shape::new(1, 1, 4, 4), 30);
        let y = upsample_nearest_to(&x, 8, 12).unwrap();
        let mut vin: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut vout: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        vin.sort_unstable();
        vin.dedup();
        vout.sort_unstable();
        vout.dedup();
        assert_eq!(vin, vout);

        let c = Tensor::full(Shape::new(1, 1, 8, 8), 0.5);
        let down = maxpool_to(&c, 4, 4).unwrap();
        let up = upsample_nearest_to(&down, 8, 8).unwrap();
        assert_eq!(up, c);
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::full(Shape::new(1, 3, 4, 4), 2.0);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape::new(1, 3, 1, 1));
        assert!(y.data().iter().all(|&v| (v - 2.0_f64).abs() < 1e-12));

        let p = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((global_avg_pool(&p).data()[0] - 2.5).abs() < 1e-12);

        let z = Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3));
        assert!(global_avg_pool(&z).data().iter().all(|&v| v == 0.0));
    }
}
