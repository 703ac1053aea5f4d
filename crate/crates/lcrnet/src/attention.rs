//! Dynamic local-context attention: cardinal feature-map groups, multi-scale
//! aggregation branches built on hierarchical large-kernel convolutions,
//! residual split attention with a learnable-temperature radix softmax, and a
//! gated elementwise output against a pointwise value path.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, Params, Tape};
use crate::error::{Error, Result};
use crate::hlk::{hlk_graph, HlkConfig, HlkLayer, HlkNodes, HlkParams};
use crate::layers::ConvLayer;
use crate::ops;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Attention hyperparameters. `groups_k` cardinal groups, each split into
/// `radix` multi-scale branches; every branch and the gate use the same
/// kernel triple.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DlcConfig {
    pub groups_k: usize,
    pub radix: usize,
    pub k_dw: usize,
    pub k_dwd: usize,
    pub dilation: usize,
    /// Initial softmax temperature (stored internally as log tau).
    pub tau_init: f64,
    /// Spatial reduction base between branches (branch j pools by base^(j-1)).
    pub scale_base: usize,
}

impl DlcConfig {
    pub fn new(groups_k: usize, radix: usize, k_dw: usize, k_dwd: usize, dilation: usize) -> Self {
        DlcConfig { groups_k, radix, k_dw, k_dwd, dilation, tau_init: 1.0, scale_base: 2 }
    }

    pub fn hlk_for(&self, channels: usize) -> Result<HlkConfig> {
        HlkConfig::new(self.k_dw, self.k_dwd, self.dilation, channels)
    }

    /// Channels per branch when the attention runs on `c` feature channels.
    pub fn branch_channels(&self, c: usize) -> Result<usize> {
        if self.groups_k == 0 || self.radix == 0 {
            return Err(Error::Config("attention needs groups_k >= 1 and radix >= 1".into()));
        }
        if c % (self.groups_k * self.radix) != 0 {
            return Err(Error::Config(format!(
                "feature channels {c} not divisible by groups*radix = {}",
                self.groups_k * self.radix
            )));
        }
        Ok(c / self.groups_k)
    }

    /// Gate bottleneck width: max(C/(2K), 4).
    pub fn gate_mid(&self, c: usize) -> usize {
        (c / (2 * self.groups_k)).max(4)
    }
}

/// Plain pointwise-conv weights for the tensor-level API.
#[derive(Clone, Debug)]
pub struct PointwiseParams<T: Real> {
    /// (out_c, in_c, 1, 1)
    pub w: Tensor<T>,
    pub b: Option<Vec<T>>,
}

impl<T: Real> PointwiseParams<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = ops::ConvKernel::new(self.w.clone(), self.b.clone(), 1, 1, 1)?;
        ops::conv2d(x, &k)
    }
}

/// Gate weights of one cardinal group.
#[derive(Clone, Debug)]
pub struct GateParams<T: Real> {
    pub hlk: HlkParams<T>,
    pub reduce: PointwiseParams<T>,
    pub expand: PointwiseParams<T>,
}

/// All weights of one attention instance, tensor-level form.
#[derive(Clone, Debug)]
pub struct DlcParams<T: Real> {
    /// K cardinal transforms, each C -> radix*C/K.
    pub transforms: Vec<PointwiseParams<T>>,
    /// [K][radix] branch kernels on C/K channels.
    pub branches: Vec<Vec<HlkParams<T>>>,
    /// K gates.
    pub gates: Vec<GateParams<T>>,
    pub log_tau: T,
    /// Value path W1: pointwise C -> C.
    pub value: PointwiseParams<T>,
}

pub(crate) struct GateNodes {
    pub hlk: HlkNodes,
    pub reduce_w: NodeId,
    pub reduce_b: NodeId,
    pub expand_w: NodeId,
    pub expand_b: NodeId,
}

fn leaf_bias<T: Real>(tape: &mut Tape<T>, b: &[T]) -> NodeId {
    tape.leaf(Tensor::new(Shape::new(1, b.len(), 1, 1), b.to_vec()).expect("bias shape"))
}

fn hlk_leaves<T: Real>(tape: &mut Tape<T>, p: &HlkParams<T>) -> HlkNodes {
    HlkNodes {
        dw: tape.leaf(p.dw.clone()),
        dwd: tape.leaf(p.dwd.clone()),
        pw_w: tape.leaf(p.pw_w.clone()),
        pw_b: p.pw_b.as_ref().map(|b| leaf_bias(tape, b)),
    }
}

/// Branch j (0-based): pool by base^j, apply the large-kernel operator,
/// upsample back to the input resolution. Branch 0 skips the resampling.
pub(crate) fn multiscale_branch_graph<T: Real>(
    tape: &mut Tape<T>,
    u: NodeId,
    j: usize,
    w: HlkNodes,
    cfg: &HlkConfig,
    scale_base: usize,
) -> Result<NodeId> {
    let s = tape.value(u).shape();
    let factor = scale_base.pow(j as u32);
    if factor == 1 {
        return hlk_graph(tape, u, w, cfg);
    }
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::Resample(format!(
            "branch {} needs resolution divisible by {factor}, got {}x{}",
            j + 1,
            s.h,
            s.w
        )));
    }
    let pooled = tape.maxpool_to(u, s.h / factor, s.w / factor)?;
    let mixed = hlk_graph(tape, pooled, w, cfg)?;
    tape.upsample_nearest_to(mixed, s.h, s.w)
}

/// Residual split attention over the radix branches of one group:
/// large-kernel gate on the branch sum, per-channel radix softmax with
/// learnable temperature, weighted branch mix plus the unweighted branch
/// mean as a residual.
pub(crate) fn residual_split_attention_graph<T: Real>(
    tape: &mut Tape<T>,
    branches: &[NodeId],
    gate: &GateNodes,
    log_tau: NodeId,
    cfg: &HlkConfig,
    radix: usize,
) -> Result<NodeId> {
    if branches.len() != radix {
        return Err(Error::Usage(format!(
            "expected {radix} branches, got {}",
            branches.len()
        )));
    }
    let shape0 = tape.value(branches[0]).shape();
    for &b in branches {
        if tape.value(b).shape() != shape0 {
            return Err(Error::Shape("split attention branches must share a shape".into()));
        }
    }
    let mut total = branches[0];
    for &b in &branches[1..] {
        total = tape.add(total, b)?;
    }
    let weights = radix_weight_graph(tape, total, gate, log_tau, cfg, radix)?;
    let cpk = shape0.c;
    let mut out: Option<NodeId> = None;
    for (j, &b) in branches.iter().enumerate() {
        let aj = tape.slice_channels(weights, j * cpk, cpk)?;
        let term = tape.chan_scale(b, aj)?;
        out = Some(match out {
            Some(o) => tape.add(o, term)?,
            None => term,
        });
    }
    let residual = tape.scale(total, T::ONE / T::from_usize(radix));
    tape.add(out.expect("radix >= 1"), residual)
}

/// Gate path alone: branch-sum -> HLK -> pooled descriptor -> bottleneck ->
/// radix softmax. Returns the (n, radix*C/K, 1, 1) weight node.
pub(crate) fn radix_weight_graph<T: Real>(
    tape: &mut Tape<T>,
    branch_sum: NodeId,
    gate: &GateNodes,
    log_tau: NodeId,
    cfg: &HlkConfig,
    radix: usize,
) -> Result<NodeId> {
    let g = hlk_graph(tape, branch_sum, gate.hlk, cfg)?;
    let desc = tape.global_avg_pool(g);
    let red = tape.conv2d(desc, gate.reduce_w, Some(gate.reduce_b), 1, 1, 1)?;
    let act = tape.relu(red);
    let logits = tape.conv2d(act, gate.expand_w, Some(gate.expand_b), 1, 1, 1)?;
    tape.radix_softmax(logits, log_tau, radix)
}

fn gate_leaves<T: Real>(tape: &mut Tape<T>, gate: &GateParams<T>) -> Result<GateNodes> {
    let reduce_b = gate
        .reduce
        .b
        .clone()
        .ok_or_else(|| Error::Config("gate reduce conv requires a bias".into()))?;
    let expand_b = gate
        .expand
        .b
        .clone()
        .ok_or_else(|| Error::Config("gate expand conv requires a bias".into()))?;
    Ok(GateNodes {
        hlk: hlk_leaves(tape, &gate.hlk),
        reduce_w: tape.leaf(gate.reduce.w.clone()),
        reduce_b: leaf_bias(tape, &reduce_b),
        expand_w: tape.leaf(gate.expand.w.clone()),
        expand_b: leaf_bias(tape, &expand_b),
    })
}

/// Transform of cardinal group `i` (0-based): pointwise C -> radix*C/K.
pub fn cardinal_transform<T: Real>(
    x: &Tensor<T>,
    i: usize,
    p: &DlcParams<T>,
) -> Result<Tensor<T>> {
    let t = p
        .transforms
        .get(i)
        .ok_or_else(|| Error::Usage(format!("cardinal group {i} out of range")))?;
    t.apply(x)
}

/// Branch `j` (1-based) of the multi-scale aggregation on plain tensors.
pub fn multiscale_branch<T: Real>(
    u: &Tensor<T>,
    j: usize,
    hlk: &HlkParams<T>,
    cfg: &HlkConfig,
    scale_base: usize,
) -> Result<Tensor<T>> {
    if j == 0 {
        return Err(Error::Usage("branch index is 1-based".into()));
    }
    let mut tape = Tape::new();
    let uid = tape.leaf(u.clone());
    let w = hlk_leaves(&mut tape, hlk);
    let y = multiscale_branch_graph(&mut tape, uid, j - 1, w, cfg, scale_base)?;
    Ok(tape.value(y).clone())
}

/// Residual split attention on plain tensors.
pub fn residual_split_attention<T: Real>(
    branches: &[Tensor<T>],
    gate: &GateParams<T>,
    tau: T,
    cfg: &HlkConfig,
) -> Result<Tensor<T>> {
    if !(tau > T::ZERO) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = branches.iter().map(|b| tape.leaf(b.clone())).collect();
    let gate_nodes = gate_leaves(&mut tape, gate)?;
    let log_tau = tape.leaf(Tensor::scalar(tau.ln()));
    let y = residual_split_attention_graph(
        &mut tape,
        &ids,
        &gate_nodes,
        log_tau,
        cfg,
        branches.len(),
    )?;
    Ok(tape.value(y).clone())
}

/// The radix softmax weights (n, radix*C/K, 1, 1) produced by a gate for the
/// given branches; exposed for invariant checks.
pub fn radix_attention_weights<T: Real>(
    branches: &[Tensor<T>],
    gate: &GateParams<T>,
    tau: T,
    cfg: &HlkConfig,
) -> Result<Tensor<T>> {
    if !(tau > T::ZERO) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let mut total = tape.leaf(branches[0].clone());
    for b in &branches[1..] {
        let bid = tape.leaf(b.clone());
        total = tape.add(total, bid)?;
    }
    let gate_nodes = gate_leaves(&mut tape, gate)?;
    let log_tau = tape.leaf(Tensor::scalar(tau.ln()));
    let y = radix_weight_graph(&mut tape, total, &gate_nodes, log_tau, cfg, branches.len())?;
    Ok(tape.value(y).clone())
}

/// Full attention forward on plain tensors.
pub fn dlc_attention_forward<T: Real>(
    x: &Tensor<T>,
    cfg: &DlcConfig,
    p: &DlcParams<T>,
) -> Result<Tensor<T>> {
    let c = x.shape().c;
    let cpk = cfg.branch_channels(c)?;
    let hlk_cfg = cfg.hlk_for(cpk)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let log_tau = tape.leaf(Tensor::scalar(p.log_tau));

    let mut group_outputs = Vec::with_capacity(cfg.groups_k);
    for i in 0..cfg.groups_k {
        let tw = tape.leaf(p.transforms[i].w.clone());
        let tb = p.transforms[i].b.as_ref().map(|b| leaf_bias(&mut tape, b));
        let xi = tape.conv2d(xid, tw, tb, 1, 1, 1)?;
        let branch_inputs = tape.split_channels(xi, cfg.radix)?;
        let mut branch_outputs = Vec::with_capacity(cfg.radix);
        for (j, &u) in branch_inputs.iter().enumerate() {
            let w = hlk_leaves(&mut tape, &p.branches[i][j]);
            branch_outputs.push(multiscale_branch_graph(
                &mut tape,
                u,
                j,
                w,
                &hlk_cfg,
                cfg.scale_base,
            )?);
        }
        let gate_nodes = gate_leaves(&mut tape, &p.gates[i])?;
        group_outputs.push(residual_split_attention_graph(
            &mut tape,
            &branch_outputs,
            &gate_nodes,
            log_tau,
            &hlk_cfg,
            cfg.radix,
        )?);
    }
    let a = tape.concat_channels(&group_outputs)?;
    let vw = tape.leaf(p.value.w.clone());
    let vb = p.value.b.as_ref().map(|b| leaf_bias(&mut tape, b));
    let v = tape.conv2d(xid, vw, vb, 1, 1, 1)?;
    let sa = tape.silu(a);
    let sv = tape.silu(v);
    let z = tape.mul(sa, sv)?;
    Ok(tape.value(z).clone())
}

/// Gate layer of one cardinal group in parameterized form.
#[derive(Clone, Debug)]
pub struct GateLayer {
    pub hlk: HlkLayer,
    pub reduce: ConvLayer,
    pub expand: ConvLayer,
}

/// Attention instance whose weights live in a [`Params`] store.
#[derive(Clone, Debug)]
pub struct DlcAttentionLayer {
    pub cfg: DlcConfig,
    pub channels: usize,
    pub transforms: Vec<ConvLayer>,
    pub branches: Vec<Vec<HlkLayer>>,
    pub gates: Vec<GateLayer>,
    pub log_tau: ParamId,
    pub value: ConvLayer,
}

impl DlcAttentionLayer {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: DlcConfig,
        channels: usize,
    ) -> Result<Self> {
        let cpk = cfg.branch_channels(channels)?;
        let hlk_cfg = cfg.hlk_for(cpk)?;
        let mid = cfg.gate_mid(channels);
        let mut transforms = Vec::with_capacity(cfg.groups_k);
        let mut branches = Vec::with_capacity(cfg.groups_k);
        let mut gates = Vec::with_capacity(cfg.groups_k);
        for i in 0..cfg.groups_k {
            transforms.push(ConvLayer::pointwise(
                params,
                rng,
                &format!("{name}.t{i}"),
                channels,
                cfg.radix * cpk,
            ));
            let mut group_branches = Vec::with_capacity(cfg.radix);
            for j in 0..cfg.radix {
                group_branches.push(HlkLayer::init(
                    params,
                    rng,
                    &format!("{name}.g{i}.branch{j}"),
                    hlk_cfg,
                ));
            }
            branches.push(group_branches);
            gates.push(GateLayer {
                hlk: HlkLayer::init(params, rng, &format!("{name}.g{i}.gate"), hlk_cfg),
                reduce: ConvLayer::pointwise(params, rng, &format!("{name}.g{i}.reduce"), cpk, mid),
                expand: ConvLayer::pointwise(
                    params,
                    rng,
                    &format!("{name}.g{i}.expand"),
                    mid,
                    cfg.radix * cpk,
                ),
            });
        }
        let log_tau = params.add(
            format!("{name}.log_tau"),
            Tensor::scalar(T::from_f64(cfg.tau_init.ln())),
        );
        let value = ConvLayer::pointwise(params, rng, &format!("{name}.w1"), channels, channels);
        Ok(DlcAttentionLayer { cfg, channels, transforms, branches, gates, log_tau, value })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        if tape.value(x).shape().c != self.channels {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {}",
                self.channels,
                tape.value(x).shape().c
            )));
        }
        let cpk = self.cfg.branch_channels(self.channels)?;
        let hlk_cfg = self.cfg.hlk_for(cpk)?;
        let log_tau = tape.param(params, self.log_tau);
        let mut group_outputs = Vec::with_capacity(self.cfg.groups_k);
        for i in 0..self.cfg.groups_k {
            let xi = self.transforms[i].forward(tape, params, x)?;
            let branch_inputs = tape.split_channels(xi, self.cfg.radix)?;
            let mut branch_outputs = Vec::with_capacity(self.cfg.radix);
            for (j, &u) in branch_inputs.iter().enumerate() {
                let w = HlkNodes {
                    dw: tape.param(params, self.branches[i][j].dw.w),
                    dwd: tape.param(params, self.branches[i][j].dwd.w),
                    pw_w: tape.param(params, self.branches[i][j].pw.w),
                    pw_b: self.branches[i][j].pw.b.map(|b| tape.param(params, b)),
                };
                branch_outputs.push(multiscale_branch_graph(
                    tape,
                    u,
                    j,
                    w,
                    &hlk_cfg,
                    self.cfg.scale_base,
                )?);
            }
            let gate = &self.gates[i];
            let gate_nodes = GateNodes {
                hlk: HlkNodes {
                    dw: tape.param(params, gate.hlk.dw.w),
                    dwd: tape.param(params, gate.hlk.dwd.w),
                    pw_w: tape.param(params, gate.hlk.pw.w),
                    pw_b: gate.hlk.pw.b.map(|b| tape.param(params, b)),
                },
                reduce_w: tape.param(params, gate.reduce.w),
                reduce_b: tape.param(params, gate.reduce.b.expect("reduce has bias")),
                expand_w: tape.param(params, gate.expand.w),
                expand_b: tape.param(params, gate.expand.b.expect("expand has bias")),
            };
            group_outputs.push(residual_split_attention_graph(
                tape,
                &branch_outputs,
                &gate_nodes,
                log_tau,
                &hlk_cfg,
                self.cfg.radix,
            )?);
        }
        let a = tape.concat_channels(&group_outputs)?;
        let v = self.value.forward(tape, params, x)?;
        let sa = tape.silu(a);
        let sv = tape.silu(v);
        tape.mul(sa, sv)
    }

    /// Analytic conv FLOPs (2 x bias-free MACs) at input resolution (h, w):
    /// cardinal transforms and the value path at full resolution, branch j at
    /// resolution / base^(j-1), the gate at full resolution, and the
    /// bottleneck pair on the 1x1 pooled descriptor.
    pub fn conv_flops<T: Real>(&self, params: &Params<T>, h: usize, w: usize) -> u64 {
        let px = (h * w) as u64;
        let mut flops = 0u64;
        for t in &self.transforms {
            flops += 2 * t.weight_count(params) as u64 * px;
        }
        for group in &self.branches {
            for (j, branch) in group.iter().enumerate() {
                let factor = self.cfg.scale_base.pow(j as u32);
                flops += branch.conv_flops(params, h / factor, w / factor);
            }
        }
        for gate in &self.gates {
            flops += gate.hlk.conv_flops(params, h, w);
            flops += 2 * gate.reduce.weight_count(params) as u64;
            flops += 2 * gate.expand.weight_count(params) as u64;
        }
        flops += 2 * self.value.weight_count(params) as u64 * px;
        flops
    }
}
