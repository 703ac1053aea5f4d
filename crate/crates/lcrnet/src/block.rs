//! Coarse-to-fine residual blocks: an attention residual followed by a
//! pre-activation convolution residual, each scaled by a learnable
//! per-channel weight.

use rand_chacha::ChaCha8Rng;

use crate::attention::{dlc_attention_forward, DlcAttentionLayer, DlcConfig, DlcParams};
use crate::autodiff::{NodeId, ParamId, Params, Tape};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, GroupNormLayer};
use crate::ops::ConvKernel;
use crate::real::Real;
use crate::tensor::{group_norm, GroupNormParams, Shape, Tensor};

/// How the residual branches are weighted.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum LayerScaleMode {
    /// Trainable per-channel weight on the branch, initialized small.
    LayerScale,
    /// Trainable per-channel weight on the identity path instead.
    ResScale,
    /// No scaling; branch added as-is.
    None,
}

impl LayerScaleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layer_scale" => Ok(LayerScaleMode::LayerScale),
            "res_scale" => Ok(LayerScaleMode::ResScale),
            "none" => Ok(LayerScaleMode::None),
            other => Err(Error::Config(format!(
                "unknown ls_mode '{other}' (expected layer_scale, res_scale, or none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerScaleMode::LayerScale => "layer_scale",
            LayerScaleMode::ResScale => "res_scale",
            LayerScaleMode::None => "none",
        }
    }
}

/// Pre-activation vs post-activation convolution residual (the latter kept
/// for the block-structure ablation).
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum BlockKind {
    PreAct,
    PostAct,
}

impl BlockKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre_act" => Ok(BlockKind::PreAct),
            "post_act" => Ok(BlockKind::PostAct),
            other => Err(Error::Config(format!(
                "unknown block_kind '{other}' (expected pre_act or post_act)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::PreAct => "pre_act",
            BlockKind::PostAct => "post_act",
        }
    }
}

/// Initial value of the branch weights for LayerScale mode.
pub const LAYER_SCALE_INIT: f64 = 1e-2;

/// Per-channel residual weights of one block.
#[derive(Clone, Debug)]
pub struct LayerScaleParams<T: Real> {
    pub lambda1: Vec<T>,
    pub lambda2: Vec<T>,
    pub mode: LayerScaleMode,
}

impl<T: Real> LayerScaleParams<T> {
    pub fn with_value(channels: usize, v: T, mode: LayerScaleMode) -> Self {
        LayerScaleParams { lambda1: vec![v; channels], lambda2: vec![v; channels], mode }
    }
}

/// Two group-norm + conv stages of a channel-preserving residual unit.
#[derive(Clone, Debug)]
pub struct PreBasicBlockParams<T: Real> {
    pub norm1: GroupNormParams<T>,
    pub conv1: ConvKernel<T>,
    pub norm2: GroupNormParams<T>,
    pub conv2: ConvKernel<T>,
}

/// Parameterized form of the same unit.
#[derive(Clone, Debug)]
pub struct ResidualPairLayer {
    pub norm1: GroupNormLayer,
    pub conv1: ConvLayer,
    pub norm2: GroupNormLayer,
    pub conv2: ConvLayer,
}

impl ResidualPairLayer {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        norm_groups: usize,
        eps: f64,
    ) -> Self {
        ResidualPairLayer {
            norm1: GroupNormLayer::init(params, &format!("{name}.norm1"), channels, norm_groups, eps),
            conv1: ConvLayer::dense(params, rng, &format!("{name}.conv1"), channels, channels, 3, 1),
            norm2: GroupNormLayer::init(params, &format!("{name}.norm2"), channels, norm_groups, eps),
            conv2: ConvLayer::dense(params, rng, &format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    fn from_tensors<T: Real>(params: &mut Params<T>, p: &PreBasicBlockParams<T>) -> Result<Self> {
        let c = p.norm1.gamma.len();
        let reg_norm = |params: &mut Params<T>, name: &str, gp: &GroupNormParams<T>| {
            let gamma = params.add(
                format!("{name}.gamma"),
                Tensor::new(Shape::new(1, c, 1, 1), gp.gamma.clone()).expect("gamma shape"),
            );
            let beta = params.add(
                format!("{name}.beta"),
                Tensor::new(Shape::new(1, c, 1, 1), gp.beta.clone()).expect("beta shape"),
            );
            GroupNormLayer { gamma, beta, groups: gp.num_groups, eps: gp.eps.to_f64() }
        };
        let reg_conv = |params: &mut Params<T>, name: &str, ck: &ConvKernel<T>| {
            let w = params.add(format!("{name}.w"), ck.weights.clone());
            let b = ck.bias.as_ref().map(|b| {
                params.add(
                    format!("{name}.b"),
                    Tensor::new(Shape::new(1, b.len(), 1, 1), b.clone()).expect("bias shape"),
                )
            });
            ConvLayer { w, b, stride: ck.stride, dilation: ck.dilation, groups: ck.groups }
        };
        Ok(ResidualPairLayer {
            norm1: reg_norm(params, "norm1", &p.norm1),
            conv1: reg_conv(params, "conv1", &p.conv1),
            norm2: reg_norm(params, "norm2", &p.norm2),
            conv2: reg_conv(params, "conv2", &p.conv2),
        })
    }

    /// Pre-activation branch: conv2(act(norm2(conv1(act(norm1(x)))))).
    pub fn pre_act_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let a = self.norm1.forward(tape, params, x)?;
        let a = tape.silu(a);
        let a = self.conv1.forward(tape, params, a)?;
        let a = self.norm2.forward(tape, params, a)?;
        let a = tape.silu(a);
        self.conv2.forward(tape, params, a)
    }

    /// Post-activation branch: norm2(conv2(act(norm1(conv1(x))))). The block
    /// applies the final activation after the residual add.
    pub fn post_act_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let a = self.conv1.forward(tape, params, x)?;
        let a = self.norm1.forward(tape, params, a)?;
        let a = tape.silu(a);
        let a = self.conv2.forward(tape, params, a)?;
        self.norm2.forward(tape, params, a)
    }
}

/// Channel-preserving residual unit: y = x + conv2(act(norm2(conv1(act(norm1(x)))))).
pub fn pre_basic_block_forward<T: Real>(
    x: &Tensor<T>,
    p: &PreBasicBlockParams<T>,
) -> Result<Tensor<T>> {
    let mut params = Params::new();
    let layer = ResidualPairLayer::from_tensors(&mut params, p)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let branch = layer.pre_act_branch(&mut tape, &params, xid)?;
    let y = tape.add(xid, branch)?;
    Ok(tape.value(y).clone())
}

fn apply_scaled_residual<T: Real>(
    x: &Tensor<T>,
    branch: &Tensor<T>,
    lambda: &[T],
    mode: LayerScaleMode,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if branch.shape() != s {
        return Err(Error::Shape(format!(
            "residual branch shape {} != input {}",
            branch.shape(),
            s
        )));
    }
    if mode != LayerScaleMode::None && lambda.len() != s.c {
        return Err(Error::Shape(format!(
            "lambda length {} != channels {}",
            lambda.len(),
            s.c
        )));
    }
    let mut out = x.clone();
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let dst = &mut out.data_mut()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            let src = &branch.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            match mode {
                LayerScaleMode::LayerScale => {
                    let l = lambda[c];
                    for (d, &b) in dst.iter_mut().zip(src) {
                        *d += l * b;
                    }
                }
                LayerScaleMode::None => {
                    for (d, &b) in dst.iter_mut().zip(src) {
                        *d += b;
                    }
                }
                LayerScaleMode::ResScale => {
                    let l = lambda[c];
                    for (d, &b) in dst.iter_mut().zip(src) {
                        *d = l * *d + b;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full coarse-to-fine block on plain tensors: an attention residual over the
/// normalized input, then the pre-activation convolution residual, each
/// weighted per channel.
pub fn c2f_block_forward<T: Real>(
    x: &Tensor<T>,
    norm1: &GroupNormParams<T>,
    cfg: &DlcConfig,
    attn: &DlcParams<T>,
    pair: &PreBasicBlockParams<T>,
    ls: &LayerScaleParams<T>,
) -> Result<Tensor<T>> {
    let normed = group_norm(x, norm1)?;
    let a = dlc_attention_forward(&normed, cfg, attn)?;
    let x1 = apply_scaled_residual(x, &a, &ls.lambda1, ls.mode)?;

    let mut params = Params::new();
    let layer = ResidualPairLayer::from_tensors(&mut params, pair)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x1.clone());
    let branch = layer.pre_act_branch(&mut tape, &params, xid)?;
    let b = tape.value(branch).clone();
    apply_scaled_residual(&x1, &b, &ls.lambda2, ls.mode)
}

/// Parameterized block used inside the network. `attn = None` is the
/// identity-attention ablation variant.
#[derive(Clone, Debug)]
pub struct C2fBlockLayer {
    pub channels: usize,
    pub norm1: GroupNormLayer,
    pub attn: Option<DlcAttentionLayer>,
    pub pair: ResidualPairLayer,
    pub ls_mode: LayerScaleMode,
    pub kind: BlockKind,
    pub lambda1: Option<ParamId>,
    pub lambda2: Option<ParamId>,
}

impl C2fBlockLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        dlc: DlcConfig,
        norm_groups: usize,
        eps: f64,
        ls_mode: LayerScaleMode,
        kind: BlockKind,
        with_attention: bool,
    ) -> Result<Self> {
        let norm1 =
            GroupNormLayer::init(params, &format!("{name}.norm1"), channels, norm_groups, eps);
        let attn = if with_attention {
            Some(DlcAttentionLayer::init(params, rng, &format!("{name}.attn"), dlc, channels)?)
        } else {
            None
        };
        let pair =
            ResidualPairLayer::init(params, rng, &format!("{name}.bb"), channels, norm_groups, eps);
        let init_val = match ls_mode {
            LayerScaleMode::LayerScale => T::from_f64(LAYER_SCALE_INIT),
            LayerScaleMode::ResScale => T::ONE,
            LayerScaleMode::None => T::ONE,
        };
        let (lambda1, lambda2) = if ls_mode == LayerScaleMode::None {
            (None, None)
        } else {
            (
                Some(params.add(
                    format!("{name}.lambda1"),
                    Tensor::full(Shape::new(1, channels, 1, 1), init_val),
                )),
                Some(params.add(
                    format!("{name}.lambda2"),
                    Tensor::full(Shape::new(1, channels, 1, 1), init_val),
                )),
            )
        };
        Ok(C2fBlockLayer { channels, norm1, attn, pair, ls_mode, kind, lambda1, lambda2 })
    }

    fn residual<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
        branch: NodeId,
        lambda: Option<ParamId>,
    ) -> Result<NodeId> {
        match self.ls_mode {
            LayerScaleMode::LayerScale => {
                let l = tape.param(params, lambda.expect("layer_scale has lambda"));
                let scaled = tape.chan_scale(branch, l)?;
                tape.add(x, scaled)
            }
            LayerScaleMode::None => tape.add(x, branch),
            LayerScaleMode::ResScale => {
                let l = tape.param(params, lambda.expect("res_scale has lambda"));
                let scaled_x = tape.chan_scale(x, l)?;
                tape.add(scaled_x, branch)
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let normed = self.norm1.forward(tape, params, x)?;
        let a = match &self.attn {
            Some(attn) => attn.forward(tape, params, normed)?,
            None => normed,
        };
        let x1 = self.residual(tape, params, x, a, self.lambda1)?;
        match self.kind {
            BlockKind::PreAct => {
                let b = self.pair.pre_act_branch(tape, params, x1)?;
                self.residual(tape, params, x1, b, self.lambda2)
            }
            BlockKind::PostAct => {
                let b = self.pair.post_act_branch(tape, params, x1)?;
                let y = self.residual(tape, params, x1, b, self.lambda2)?;
                Ok(tape.silu(y))
            }
        }
    }

    /// Analytic conv FLOPs at (h, w); normalization, scaling, and adds are
    /// excluded from the cost model.
    pub fn conv_flops<T: Real>(&self, params: &Params<T>, h: usize, w: usize) -> u64 {
        let px = (h * w) as u64;
        let mut flops = match &self.attn {
            Some(attn) => attn.conv_flops(params, h, w),
            None => 0,
        };
        flops += 2 * self.pair.conv1.weight_count(params) as u64 * px;
        flops += 2 * self.pair.conv2.weight_count(params) as u64 * px;
        flops
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_param};
    use crate::tensor::default_norm_groups;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_pair(c: usize, seed: u64) -> PreBasicBlockParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = default_norm_groups(c);
        let mut norm = || {
            let mut p = GroupNormParams::identity(c, groups);
            for g in &mut p.gamma {
                *g = rng.gen_range(0.5..1.5);
            }
            for b in &mut p.beta {
                *b = rng.gen_range(-0.3..0.3);
            }
            p
        };
        let (norm1, norm2) = (norm(), norm());
        let conv = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::from_fn(Shape::new(c, c, 3, 3), |_, _, _, _| rng.gen_range(-0.2..0.2));
            let b = (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect();
            ConvKernel::new(w, Some(b), 1, 1, 1).unwrap()
        };
        PreBasicBlockParams { norm1, conv1: conv(seed + 1), norm2, conv2: conv(seed + 2) }
    }

    #[test]
    fn zero_convs_make_identity() {
        let c = 4;
        let mut p = rand_pair(c, 0);
        p.conv1 = ConvKernel::new(Tensor::zeros(Shape::new(c, c, 3, 3)), Some(vec![0.0; c]), 1, 1, 1)
            .unwrap();
        p.conv2 = ConvKernel::new(Tensor::zeros(Shape::new(c, c, 3, 3)), Some(vec![0.0; c]), 1, 1, 1)
            .unwrap();
        let x = rand_tensor(Shape::new(1, c, 6, 6), 1);
        let y = pre_basic_block_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shape_preserved() {
        let p = rand_pair(16, 2);
        let x = rand_tensor(Shape::new(1, 16, 8, 8), 3);
        let y = pre_basic_block_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn pre_basic_block_grad_check() {
        for seed in 0..5u64 {
            let p = rand_pair(4, 10 + seed);
            let x = rand_tensor(Shape::new(1, 4, 5, 5), 20 + seed);
            let err = grad_check(
                |tape, xid| {
                    let mut params = Params::new();
                    let layer = ResidualPairLayer::from_tensors(&mut params, &p)?;
                    let branch = layer.pre_act_branch(tape, &params, xid)?;
                    let y = tape.add(xid, branch)?;
                    let z = tape.silu(y);
                    Ok(tape.sum(z))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: err = {err}");
        }
    }

    fn test_block(
        c: usize,
        ls_mode: LayerScaleMode,
        with_attention: bool,
        seed: u64,
    ) -> (Params<f64>, C2fBlockLayer) {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dlc = DlcConfig::new(2, 2, 3, 3, 2);
        let block = C2fBlockLayer::init(
            &mut params,
            &mut rng,
            "blk",
            c,
            dlc,
            default_norm_groups(c),
            1e-5,
            ls_mode,
            BlockKind::PreAct,
            with_attention,
        )
        .unwrap();
        (params, block)
    }

    #[test]
    fn zero_lambda_is_exact_identity() {
        let (mut params, block) = test_block(4, LayerScaleMode::LayerScale, true, 0);
        params.value_mut(block.lambda1.unwrap()).data_mut().fill(0.0);
        params.value_mut(block.lambda2.unwrap()).data_mut().fill(0.0);
        let x = rand_tensor(Shape::new(2, 4, 8, 8), 1);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn mode_none_equals_layer_scale_at_one_bit_exactly() {
        let (mut params_ls, block_ls) = test_block(4, LayerScaleMode::LayerScale, true, 7);
        params_ls.value_mut(block_ls.lambda1.unwrap()).data_mut().fill(1.0);
        params_ls.value_mut(block_ls.lambda2.unwrap()).data_mut().fill(1.0);
        // same seed -> identical weights for the none-mode block (lambda params
        // are registered last so the draw sequence matches)
        let (params_none, block_none) = test_block(4, LayerScaleMode::None, true, 7);
        let x = rand_tensor(Shape::new(1, 4, 8, 8), 8);
        let mut t1 = Tape::new();
        let x1 = t1.leaf(x.clone());
        let y1 = block_ls.forward(&mut t1, &params_ls, x1).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(x.clone());
        let y2 = block_none.forward(&mut t2, &params_none, x2).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn block_shape_preserved_and_pure_op_contract() {
        let (params, block) = test_block(8, LayerScaleMode::LayerScale, true, 9);
        let x = rand_tensor(Shape::new(1, 8, 16, 16), 10);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
        let _ = &params;

        // pure op: lambda = 0 collapses to identity
        let dlc = DlcConfig::new(2, 2, 3, 3, 2);
        let c = 8;
        let norm1 = GroupNormParams::identity(c, default_norm_groups(c));
        let cpk = dlc.branch_channels(c).unwrap();
        let mk_hlk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            crate::hlk::HlkParams {
                dw: rand_tensor(Shape::new(cpk, 1, 3, 3), seed),
                dwd: rand_tensor(Shape::new(cpk, 1, 3, 3), seed + 1),
                pw_w: rand_tensor(Shape::new(cpk, 2 * cpk, 1, 1), seed + 2),
                pw_b: Some((0..cpk).map(|_| rng.gen_range(-0.1..0.1)).collect()),
            }
        };
        let mk_pw = |i: usize, o: usize, seed: u64| crate::attention::PointwiseParams {
            w: rand_tensor(Shape::new(o, i, 1, 1), seed),
            b: Some(vec![0.1; o]),
        };
        let attn = DlcParams {
            transforms: (0..2).map(|i| mk_pw(c, dlc.radix * cpk, 30 + i as u64)).collect(),
            branches: (0..2)
                .map(|i| (0..2).map(|j| mk_hlk(40 + (i * 3 + j) as u64)).collect())
                .collect(),
            gates: (0..2)
                .map(|i| crate::attention::GateParams {
                    hlk: mk_hlk(50 + i as u64),
                    reduce: mk_pw(cpk, dlc.gate_mid(c), 60 + i as u64),
                    expand: mk_pw(dlc.gate_mid(c), dlc.radix * cpk, 70 + i as u64),
                })
                .collect(),
            log_tau: 0.0,
            value: mk_pw(c, c, 80),
        };
        let pair = rand_pair(c, 90);
        let ls = LayerScaleParams::with_value(c, 0.0, LayerScaleMode::LayerScale);
        let y = c2f_block_forward(&x, &norm1, &dlc, &attn, &pair, &ls).unwrap();
        assert_eq!(y, x);
        let ls = LayerScaleParams::with_value(c, 0.01, LayerScaleMode::LayerScale);
        let y = c2f_block_forward(&x, &norm1, &dlc, &attn, &pair, &ls).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y != x);
    }

    #[test]
    fn near_identity_at_small_lambda_init() {
        // freshly initialized block with lambda = 1e-2 barely perturbs a
        // unit-normal input
        let (params, block) = test_block(8, LayerScaleMode::LayerScale, true, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(Shape::new(2, 8, 16, 16), |_, _, _, _| {
            // Box-Muller standard normal
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        let diff2: f64 = tape
            .value(y)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let norm2: f64 = x.data().iter().map(|v| v * v).sum();
        let rel = (diff2 / norm2).sqrt();
        assert!(rel < 0.10, "relative deviation {rel}");
    }

    #[test]
    fn block_grad_check_including_lambda() {
        let (params, block) = test_block(4, LayerScaleMode::LayerScale, true, 13);
        let x = rand_tensor(Shape::new(1, 4, 4, 4), 14);
        let err = grad_check(
            |tape, xid| {
                let y = block.forward(tape, &params, xid)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input err = {err}");

        for lambda in [block.lambda1.unwrap(), block.lambda2.unwrap()] {
            let err = grad_check_param(
                &params,
                lambda,
                |tape, p| {
                    let xid = tape.leaf(x.clone());
                    let y = block.forward(tape, p, xid)?;
                    Ok(tape.sum(y))
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "lambda err = {err}");
        }
    }

    #[test]
    fn res_scale_and_post_act_variants_run() {
        let (params, block) = test_block(4, LayerScaleMode::ResScale, true, 15);
        let x = rand_tensor(Shape::new(1, 4, 8, 8), 16);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());

        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dlc = DlcConfig::new(2, 2, 3, 3, 2);
        let block = C2fBlockLayer::init(
            &mut params,
            &mut rng,
            "blk",
            4,
            dlc,
            4,
            1e-5,
            LayerScaleMode::LayerScale,
            BlockKind::PostAct,
            true,
        )
        .unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
    }

    #[test]
    fn identity_attention_variant() {
        let (params, block) = test_block(4, LayerScaleMode::LayerScale, false, 18);
        assert!(block.attn.is_none());
        let x = rand_tensor(Shape::new(1, 4, 8, 8), 19);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &params, xid).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
    }
}
