//! Composite convolutional units: depthwise separable convolution (DSC),
//! inception convolution (IC), residual inception block (RIB), hybrid
//! pooling, and the plain double-convolution block the ablation baseline
//! falls back to.
//!
//! Each unit is a pair: an `init_*` function that registers its parameter
//! tensors under a dotted name prefix (e.g. `enc0.ic1.b3.dw`) and returns
//! a small struct of [`ParamId`]s, and a `*_forward` function that records
//! the unit onto a [`Tape`]. The structs hold ids only — values live in
//! the [`ParamStore`] — so one model can run many tapes without copying
//! weights.
//!
//! Composition summary:
//! * DSC = depthwise `f x f` (no bias) then pointwise `1 x 1` (bias);
//! * IC(d -> r) = four parallel branches (DSC 1/3/5 and a same-mode pool
//!   branch, each ending in BN + ReLU) concatenated to `4r` channels and
//!   mixed by a `1 x 1` convolution with BN + ReLU;
//! * RIB(d -> d') = IC1(d -> d') -> IC2(d' -> d') plus a batch-normalised
//!   3x3 DSC shortcut, merged by addition, ReLU after the merge;
//! * hybrid pool = spectral branch and max branch concatenated and mixed
//!   by a learned `1 x 1` convolution (valid mode halves extents, same
//!   mode preserves them).

use alloc::format;
use alloc::string::String;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::spectral::PoolMode;
use crate::tape::{BnIds, NodeId, Tape};
use crate::tensor::{Real, Shape, Tensor};

/// Descriptive record of a block for layer tables and census output.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Output filter count (r or d').
    pub filters: usize,
    /// Largest spatial kernel extent in the block.
    pub kernel: usize,
    pub use_hybrid_pool: bool,
    pub use_residual: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Dsc,
    Ic,
    Rib,
    DoubleConv,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(CoreError::config("block filter count must be >= 1"));
        }
        if self.kind == BlockKind::Dsc && self.kernel % 2 == 0 {
            return Err(CoreError::config(format!(
                "DSC kernel extent {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Batch-norm parameter bundle: trainable scale/shift plus non-trainable
/// running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub ids: BnIds,
}

pub fn init_bn(store: &mut ParamStore, prefix: &str, d: usize) -> Result<BnParams> {
    let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(Shape::d1(d), 1.0), true)?;
    let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(Shape::d1(d)), true)?;
    let run_mean = store.add(format!("{prefix}.run_mean"), Tensor::zeros(Shape::d1(d)), false)?;
    let run_var = store.add(format!("{prefix}.run_var"), Tensor::full(Shape::d1(d), 1.0), false)?;
    Ok(BnParams {
        ids: BnIds {
            gamma,
            beta,
            run_mean,
            run_var,
        },
    })
}

fn bn_relu(tape: &mut Tape, x: NodeId, bn: &BnParams, train: bool) -> Result<NodeId> {
    let n = tape.batch_norm(x, bn.ids, train)?;
    Ok(tape.relu(n))
}

/// Standard convolution parameters (weights + bias).
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub f: usize,
}

pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    f: usize,
    d: usize,
    r: usize,
) -> Result<ConvParams> {
    let w = store.add(
        format!("{prefix}.w"),
        he_normal(rng, Shape::d4(f, f, d, r), f * f * d),
        true,
    )?;
    let b = store.add(format!("{prefix}.b"), Tensor::zeros(Shape::d1(r)), true)?;
    Ok(ConvParams { w, b, f })
}

pub fn conv_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &ConvParams,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    tape.conv2d(x, p.w, Some(p.b), stride, pad)
}

/// Depthwise separable convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct DscParams {
    pub dw: ParamId,
    pub pw: ParamId,
    pub pb: ParamId,
    pub f: usize,
}

pub fn init_dsc(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    f: usize,
    d: usize,
    r: usize,
) -> Result<DscParams> {
    let dw = store.add(
        format!("{prefix}.dw"),
        he_normal(rng, Shape::d3(f, f, d), f * f),
        true,
    )?;
    let pw = store.add(
        format!("{prefix}.pw"),
        he_normal(rng, Shape::d4(1, 1, d, r), d),
        true,
    )?;
    let pb = store.add(format!("{prefix}.pb"), Tensor::zeros(Shape::d1(r)), true)?;
    Ok(DscParams { dw, pw, pb, f })
}

/// Depthwise stage then pointwise `1 x 1` mixing stage; the bias sits on
/// the pointwise stage only.
pub fn dsc_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &DscParams,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let dwed = tape.depthwise(x, p.dw, stride, pad)?;
    tape.conv2d(dwed, p.pw, Some(p.pb), 1, 0)
}

/// Weight counts of a depthwise separable versus standard convolution and
/// their exact ratio `1/r + 1/f^2` (biases excluded from both counts).
pub fn dsc_cost_ratio(f: usize, d: usize, r: usize) -> (Real, usize, usize) {
    let n_sc = f * f * d * r;
    let n_dsc = f * f * d + d * r;
    (n_dsc as Real / n_sc as Real, n_dsc, n_sc)
}

/// Learned mix over the concatenated spectral and max branches.
#[derive(Clone, Copy, Debug)]
pub struct HybridPoolParams {
    pub mix: ConvParams,
}

pub fn init_hybrid_pool(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_out: usize,
) -> Result<HybridPoolParams> {
    let mix = init_conv(store, rng, &format!("{prefix}.mix"), 1, 2 * d, d_out)?;
    Ok(HybridPoolParams { mix })
}

/// Spectral and max branches in parallel, concatenated `[spectral, max]`,
/// then the learned `1 x 1` mix. Valid mode halves both extents (and
/// requires them even); same mode preserves them via the spectral low-pass
/// and a clipped 3x3 stride-1 max.
pub fn hybrid_pool_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &HybridPoolParams,
    mode: PoolMode,
) -> Result<NodeId> {
    let (w, h, _d) = tape.value(x).shape().whd()?;
    let (spectral, max) = match mode {
        PoolMode::Valid => {
            if w % 2 != 0 || h % 2 != 0 {
                return Err(CoreError::config(format!(
                    "valid hybrid pooling requires even extents, got ({w},{h})"
                )));
            }
            let s = tape.spectral_pool(x, w / 2, h / 2)?;
            let m = tape.max_pool(x, 2, 2, PoolMode::Valid)?;
            (s, m)
        }
        PoolMode::Same => {
            let s = tape.spectral_lowpass(x)?;
            let m = tape.max_pool(x, 3, 1, PoolMode::Same)?;
            (s, m)
        }
    };
    let cat = tape.concat(&[spectral, max])?;
    conv_forward(tape, cat, &p.mix, 1, 0)
}

/// Between-stage downsampling: hybrid (learned) or plain max pooling for
/// the ablation baseline.
#[derive(Clone, Debug)]
pub enum DownsampleParams {
    Hybrid(HybridPoolParams),
    Max,
}

pub fn downsample_forward(tape: &mut Tape, x: NodeId, p: &DownsampleParams) -> Result<NodeId> {
    match p {
        DownsampleParams::Hybrid(hp) => hybrid_pool_forward(tape, x, hp, PoolMode::Valid),
        DownsampleParams::Max => {
            let (w, h, _d) = tape.value(x).shape().whd()?;
            if w % 2 != 0 || h % 2 != 0 {
                return Err(CoreError::config(format!(
                    "downsampling requires even extents, got ({w},{h})"
                )));
            }
            tape.max_pool(x, 2, 2, PoolMode::Valid)
        }
    }
}

/// The pooling branch inside an inception convolution: a same-mode hybrid
/// pool mapping `2d -> r`, or (hybrid pooling disabled) a plain clipped
/// 3x3 max followed by a `1 x 1` projection to `r`.
#[derive(Clone, Debug)]
pub enum PoolBranchParams {
    Hybrid(HybridPoolParams),
    Plain(ConvParams),
}

fn pool_branch_forward(tape: &mut Tape, x: NodeId, p: &PoolBranchParams) -> Result<NodeId> {
    match p {
        PoolBranchParams::Hybrid(hp) => hybrid_pool_forward(tape, x, hp, PoolMode::Same),
        PoolBranchParams::Plain(proj) => {
            let m = tape.max_pool(x, 3, 1, PoolMode::Same)?;
            conv_forward(tape, m, proj, 1, 0)
        }
    }
}

/// Inception convolution parameters: three DSC branches, a pool branch,
/// per-branch batch norms, and the final mix.
#[derive(Clone, Debug)]
pub struct IcParams {
    pub branch1: DscParams,
    pub bn1: BnParams,
    pub branch3: DscParams,
    pub bn3: BnParams,
    pub branch5: DscParams,
    pub bn5: BnParams,
    pub pool: PoolBranchParams,
    pub bn_pool: BnParams,
    pub mix: ConvParams,
    pub bn_mix: BnParams,
}

pub fn init_ic(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    r: usize,
    use_hybrid_pool: bool,
) -> Result<IcParams> {
    if r < 4 {
        return Err(CoreError::config(format!(
            "inception convolution needs r >= 4 (four branches), got {r}"
        )));
    }
    let branch1 = init_dsc(store, rng, &format!("{prefix}.b1"), 1, d, r)?;
    let bn1 = init_bn(store, &format!("{prefix}.bn1"), r)?;
    let branch3 = init_dsc(store, rng, &format!("{prefix}.b3"), 3, d, r)?;
    let bn3 = init_bn(store, &format!("{prefix}.bn3"), r)?;
    let branch5 = init_dsc(store, rng, &format!("{prefix}.b5"), 5, d, r)?;
    let bn5 = init_bn(store, &format!("{prefix}.bn5"), r)?;
    let pool = if use_hybrid_pool {
        PoolBranchParams::Hybrid(init_hybrid_pool(store, rng, &format!("{prefix}.pool"), d, r)?)
    } else {
        PoolBranchParams::Plain(init_conv(store, rng, &format!("{prefix}.pool.proj"), 1, d, r)?)
    };
    let bn_pool = init_bn(store, &format!("{prefix}.bnp"), r)?;
    let mix = init_conv(store, rng, &format!("{prefix}.mix"), 1, 4 * r, r)?;
    let bn_mix = init_bn(store, &format!("{prefix}.bnm"), r)?;
    Ok(IcParams {
        branch1,
        bn1,
        branch3,
        bn3,
        branch5,
        bn5,
        pool,
        bn_pool,
        mix,
        bn_mix,
    })
}

pub fn ic_forward(tape: &mut Tape, x: NodeId, p: &IcParams, train: bool) -> Result<NodeId> {
    let b1 = dsc_forward(tape, x, &p.branch1, 1, 0)?;
    let b1 = bn_relu(tape, b1, &p.bn1, train)?;
    let b3 = dsc_forward(tape, x, &p.branch3, 1, 1)?;
    let b3 = bn_relu(tape, b3, &p.bn3, train)?;
    let b5 = dsc_forward(tape, x, &p.branch5, 1, 2)?;
    let b5 = bn_relu(tape, b5, &p.bn5, train)?;
    let bp = pool_branch_forward(tape, x, &p.pool)?;
    let bp = bn_relu(tape, bp, &p.bn_pool, train)?;
    let cat = tape.concat(&[b1, b3, b5, bp])?;
    let mixed = conv_forward(tape, cat, &p.mix, 1, 0)?;
    bn_relu(tape, mixed, &p.bn_mix, train)
}

/// Residual inception block parameters.
#[derive(Clone, Debug)]
pub struct RibParams {
    pub ic1: IcParams,
    pub ic2: IcParams,
    /// 3x3 DSC + BN shortcut; absent when the residual toggle is off.
    pub shortcut: Option<(DscParams, BnParams)>,
}

pub fn init_rib(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_prime: usize,
    use_hybrid_pool: bool,
    use_residual: bool,
) -> Result<RibParams> {
    let ic1 = init_ic(store, rng, &format!("{prefix}.ic1"), d, d_prime, use_hybrid_pool)?;
    let ic2 = init_ic(store, rng, &format!("{prefix}.ic2"), d_prime, d_prime, use_hybrid_pool)?;
    let shortcut = if use_residual {
        let dsc = init_dsc(store, rng, &format!("{prefix}.sc"), 3, d, d_prime)?;
        let bn = init_bn(store, &format!("{prefix}.scbn"), d_prime)?;
        Some((dsc, bn))
    } else {
        None
    };
    Ok(RibParams { ic1, ic2, shortcut })
}

pub fn rib_forward(tape: &mut Tape, x: NodeId, p: &RibParams, train: bool) -> Result<NodeId> {
    let mid = ic_forward(tape, x, &p.ic1, train)?;
    let main = ic_forward(tape, mid, &p.ic2, train)?;
    let merged = match &p.shortcut {
        Some((dsc, bn)) => {
            let s = dsc_forward(tape, x, dsc, 1, 1)?;
            let s = tape.batch_norm(s, bn.ids, train)?;
            tape.add(main, s)?
        }
        None => main,
    };
    Ok(tape.relu(merged))
}

/// Plain double 3x3 convolution block (the ablation baseline stage).
#[derive(Clone, Debug)]
pub struct DoubleConvParams {
    pub c1: ConvParams,
    pub bn1: BnParams,
    pub c2: ConvParams,
    pub bn2: BnParams,
}

pub fn init_double_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    r: usize,
) -> Result<DoubleConvParams> {
    let c1 = init_conv(store, rng, &format!("{prefix}.c1"), 3, d, r)?;
    let bn1 = init_bn(store, &format!("{prefix}.bn1"), r)?;
    let c2 = init_conv(store, rng, &format!("{prefix}.c2"), 3, r, r)?;
    let bn2 = init_bn(store, &format!("{prefix}.bn2"), r)?;
    Ok(DoubleConvParams { c1, bn1, c2, bn2 })
}

pub fn double_conv_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &DoubleConvParams,
    train: bool,
) -> Result<NodeId> {
    let a = conv_forward(tape, x, &p.c1, 1, 1)?;
    let a = bn_relu(tape, a, &p.bn1, train)?;
    let b = conv_forward(tape, a, &p.c2, 1, 1)?;
    bn_relu(tape, b, &p.bn2, train)
}

/// One encoder/decoder stage: a RIB or (baseline) a double-conv block.
#[derive(Clone, Debug)]
pub enum StageBlock {
    Rib(RibParams),
    Plain(DoubleConvParams),
}

pub fn stage_forward(tape: &mut Tape, x: NodeId, block: &StageBlock, train: bool) -> Result<NodeId> {
    match block {
        StageBlock::Rib(p) => rib_forward(tape, x, p, train),
        StageBlock::Plain(p) => double_conv_forward(tape, x, p, train),
    }
}

impl StageBlock {
    pub fn spec(&self, filters: usize) -> BlockSpec {
        match self {
            StageBlock::Rib(p) => BlockSpec {
                kind: BlockKind::Rib,
                filters,
                kernel: 5,
                use_hybrid_pool: matches!(p.ic1.pool, PoolBranchParams::Hybrid(_)),
                use_residual: p.shortcut.is_some(),
            },
            StageBlock::Plain(_) => BlockSpec {
                kind: BlockKind::DoubleConv,
                filters,
                kernel: 3,
                use_hybrid_pool: false,
                use_residual: false,
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            StageBlock::Rib(_) => "rib",
            StageBlock::Plain(_) => "double_conv",
        }
    }
}

/// Dotted-name helper shared by the network builders.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
