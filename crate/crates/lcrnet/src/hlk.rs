//! The hierarchical large-kernel convolution operator: a dense depthwise
//! stage, a dilated depthwise stage on its output, channel concatenation of
//! the two, and a pointwise mix back to the input width. Includes the
//! analytic parameter/FLOP formulas and the kernel-composition oracle used to
//! verify the decomposition.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Params, Tape};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::ops::{ConvKernel, Kernel2d};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Kernel-size triple of one hierarchical large-kernel instance.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct HlkConfig {
    /// Dense depthwise stage kernel size (odd).
    pub k_dw: usize,
    /// Dilated depthwise stage kernel size (odd).
    pub k_dwd: usize,
    /// Dilation of the second stage.
    pub dilation: usize,
    /// Channel count the instance operates on.
    pub channels: usize,
    /// Nominal large-kernel span: k_dw + (k_dwd - 1) * dilation.
    pub equivalent_k: usize,
}

impl HlkConfig {
    pub fn new(k_dw: usize, k_dwd: usize, dilation: usize, channels: usize) -> Result<Self> {
        if k_dw % 2 == 0 || k_dwd % 2 == 0 {
            return Err(Error::Config(format!(
                "hlk kernel sizes must be odd, got {{{k_dw},{k_dwd}}}"
            )));
        }
        if dilation < 1 {
            return Err(Error::Config("hlk dilation must be >= 1".into()));
        }
        if channels == 0 {
            return Err(Error::Config("hlk channel count must be positive".into()));
        }
        let equivalent_k = k_dw + (k_dwd - 1) * dilation;
        Ok(HlkConfig { k_dw, k_dwd, dilation, channels, equivalent_k })
    }
}

/// Weights of one instance: per-channel depthwise stages plus the 2C -> C
/// pointwise mix (with bias).
#[derive(Clone, Debug)]
pub struct HlkParams<T: Real> {
    /// (C, 1, k_dw, k_dw)
    pub dw: Tensor<T>,
    /// (C, 1, k_dwd, k_dwd), applied with the configured dilation
    pub dwd: Tensor<T>,
    /// (C, 2C, 1, 1)
    pub pw_w: Tensor<T>,
    /// per-out-channel bias
    pub pw_b: Option<Vec<T>>,
}

/// Node-level weight bundle used when the instance participates in a larger
/// recorded graph.
#[derive(Copy, Clone, Debug)]
pub(crate) struct HlkNodes {
    pub dw: NodeId,
    pub dwd: NodeId,
    pub pw_w: NodeId,
    pub pw_b: Option<NodeId>,
}

/// Records the three-stage pipeline onto the tape and returns the output node.
pub(crate) fn hlk_graph<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: HlkNodes,
    cfg: &HlkConfig,
) -> Result<NodeId> {
    let c = cfg.channels;
    if tape.value(x).shape().c != c {
        return Err(Error::Shape(format!(
            "hlkconv expects {c} channels, input has {}",
            tape.value(x).shape().c
        )));
    }
    let xhat = tape.conv2d(x, w.dw, None, 1, 1, c)?;
    let dil = tape.conv2d(xhat, w.dwd, None, 1, cfg.dilation, c)?;
    let cat = tape.concat_channels(&[xhat, dil])?;
    tape.conv2d(cat, w.pw_w, w.pw_b, 1, 1, 1)
}

/// Forward pass of one instance on plain tensors.
pub fn hlkconv_forward<T: Real>(
    x: &Tensor<T>,
    cfg: &HlkConfig,
    p: &HlkParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let nodes = HlkNodes {
        dw: tape.leaf(p.dw.clone()),
        dwd: tape.leaf(p.dwd.clone()),
        pw_w: tape.leaf(p.pw_w.clone()),
        pw_b: p.pw_b.as_ref().map(|b| {
            tape.leaf(Tensor::new(Shape::new(1, b.len(), 1, 1), b.clone()).expect("bias shape"))
        }),
    };
    let y = hlk_graph(&mut tape, xid, nodes, cfg)?;
    Ok(tape.value(y).clone())
}

/// Parameterized layer form used inside the network.
#[derive(Clone, Debug)]
pub struct HlkLayer {
    pub cfg: HlkConfig,
    pub dw: ConvLayer,
    pub dwd: ConvLayer,
    pub pw: ConvLayer,
}

impl HlkLayer {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: HlkConfig,
    ) -> Self {
        let c = cfg.channels;
        let dw = ConvLayer::depthwise(params, rng, &format!("{name}.dw"), c, cfg.k_dw, 1);
        let dwd =
            ConvLayer::depthwise(params, rng, &format!("{name}.dwd"), c, cfg.k_dwd, cfg.dilation);
        let pw = ConvLayer::pointwise(params, rng, &format!("{name}.pw"), 2 * c, c);
        HlkLayer { cfg, dw, dwd, pw }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let nodes = HlkNodes {
            dw: tape.param(params, self.dw.w),
            dwd: tape.param(params, self.dwd.w),
            pw_w: tape.param(params, self.pw.w),
            pw_b: self.pw.b.map(|b| tape.param(params, b)),
        };
        hlk_graph(tape, x, nodes, &self.cfg)
    }

    /// Bias-free weight count at one resolution, for the FLOP model.
    pub fn weight_count<T: Real>(&self, params: &Params<T>) -> usize {
        self.dw.weight_count(params) + self.dwd.weight_count(params) + self.pw.weight_count(params)
    }

    /// Multiply-add pairs x2 when run at (h, w); all three stages share the
    /// output resolution.
    pub fn conv_flops<T: Real>(&self, params: &Params<T>, h: usize, w: usize) -> u64 {
        2 * self.weight_count(params) as u64 * (h * w) as u64
    }
}

/// Analytic cost of the decomposition for an equivalent K x K kernel at
/// dilation d over C channels: params = C * (ceil(K/d)^2 + (2d-1)^2) + 2C^2,
/// flops = params * W * H (bias excluded).
pub fn hlk_cost(k: usize, d: usize, c: usize, w: usize, h: usize) -> (u64, u64) {
    let kd = (k as u64 + d as u64 - 1) / d as u64;
    let dd = 2 * d as u64 - 1;
    let params = c as u64 * (kd * kd + dd * dd) + 2 * (c as u64) * (c as u64);
    (params, params * w as u64 * h as u64)
}

/// Exact trainable-scalar count of an instantiated layer built from the
/// explicit kernel triple.
pub fn counted_hlk_params(cfg: &HlkConfig, include_bias: bool) -> u64 {
    let c = cfg.channels as u64;
    let mut p = c * (cfg.k_dw as u64 * cfg.k_dw as u64)
        + c * (cfg.k_dwd as u64 * cfg.k_dwd as u64)
        + 2 * c * c;
    if include_bias {
        p += c;
    }
    p
}

/// Dense kernel whose cross-correlation equals applying `k1` and then `k2`
/// dilated by `d2`: g[u] = sum_o k2[o] * k1[u - d2*o]. Support size is
/// k1 + (k2 - 1) * d2.
pub fn compose_depthwise_kernels<T: Real>(
    k1: &Kernel2d<T>,
    k2: &Kernel2d<T>,
    d2: usize,
) -> Result<Kernel2d<T>> {
    if d2 < 1 {
        return Err(Error::Config("composition dilation must be >= 1".into()));
    }
    let a = k1.size();
    let b = k2.size();
    let ra = (a / 2) as isize;
    let rb = (b / 2) as isize;
    let s = a + (b - 1) * d2;
    let rs = (s / 2) as isize;
    let mut g = vec![T::ZERO; s * s];
    for uy in -rs..=rs {
        for ux in -rs..=rs {
            let mut acc = T::ZERO;
            for oy in -rb..=rb {
                for ox in -rb..=rb {
                    let py = uy - d2 as isize * oy;
                    let px = ux - d2 as isize * ox;
                    if py.abs() <= ra && px.abs() <= ra {
                        acc += k2.at((oy + rb) as usize, (ox + rb) as usize)
                            * k1.at((py + ra) as usize, (px + ra) as usize);
                    }
                }
            }
            g[((uy + rs) * s as isize + ux + rs) as usize] = acc;
        }
    }
    Kernel2d::new(s, g)
}

/// Depthwise [`ConvKernel`] in which every channel shares one 2-D kernel.
pub fn shared_depthwise_kernel<T: Real>(
    c: usize,
    k: &Kernel2d<T>,
    dilation: usize,
) -> ConvKernel<T> {
    let size = k.size();
    let w = Tensor::from_fn(Shape::new(c, 1, size, size), |_, _, y, x| k.at(y, x));
    ConvKernel::new(w, None, 1, dilation, c).expect("valid depthwise kernel")
}
