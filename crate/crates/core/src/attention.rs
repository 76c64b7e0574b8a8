//! Spectral spatial and depth (SSD) attention for skip connections.
//!
//! Two gates refine an encoder feature map before it is concatenated into
//! the decoder:
//!
//! * depth attention (SDA): a global spectral-max descriptor is squeezed
//!   through a `1 x 1` bottleneck network into a per-channel gate, the
//!   gated map is then re-mixed by a `1 x 1` convolution with BN + ReLU;
//! * spatial attention (SSA): the deeper decoder-side map (half the
//!   resolution, reconciled to twice the channels) and a stride-2
//!   projection of the SDA output are summed into a BN + ReLU context,
//!   squeezed to one channel, passed through the gate activation and
//!   upsampled into a per-pixel gate on the SDA output.
//!
//! `ssd_forward` wires both together for one skip: encoder map
//! `(2m, 2n, c)` and decoder context `(m, n, c_d)` produce a refined
//! `(2m, 2n, c)` map; a `1 x 1` reconciliation convolution is inserted
//! when `c_d != 2c`.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::blocks::{conv_forward, init_bn, init_conv, BnParams, ConvParams};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};

/// Activation of the spatial gate. The bounded sigmoid is the default;
/// the unbounded ReLU reading is selectable for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateActivation {
    Sigmoid,
    Relu,
}

/// Spectral depth attention parameters: the bottleneck descriptor network
/// and the output re-mix.
#[derive(Clone, Copy, Debug)]
pub struct SdaParams {
    pub squeeze: ConvParams,
    pub expand: ConvParams,
    pub descriptor: ConvParams,
    pub mix: ConvParams,
    pub bn: BnParams,
}

pub fn init_sda(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    p: usize,
) -> Result<SdaParams> {
    let mid = (p / 4).max(1);
    let squeeze = init_conv(store, rng, &format!("{prefix}.sq"), 1, p, mid)?;
    let expand = init_conv(store, rng, &format!("{prefix}.ex"), 1, mid, p)?;
    let descriptor = init_conv(store, rng, &format!("{prefix}.ad"), 1, p, p)?;
    let mix = init_conv(store, rng, &format!("{prefix}.mix"), 1, p, p)?;
    let bn = init_bn(store, &format!("{prefix}.bn"), p)?;
    Ok(SdaParams {
        squeeze,
        expand,
        descriptor,
        mix,
        bn,
    })
}

/// Global spectral-max pooling: spectral pool to the half-extent grid,
/// then the global per-channel maximum.
pub fn global_spectral_max_pool(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (w, h, _d) = tape.value(x).shape().whd()?;
    if w < 2 || h < 2 {
        return Err(CoreError::shape(format!(
            "global spectral-max pooling needs extents >= 2, got ({w},{h})"
        )));
    }
    let pooled = tape.spectral_pool(x, w.div_ceil(2), h.div_ceil(2))?;
    tape.global_max(pooled)
}

/// Depth attention: descriptor network on the global spectral-max vector,
/// per-channel gating, then `1 x 1` mix + BN + ReLU.
pub fn sda_forward(tape: &mut Tape, x: NodeId, p: &SdaParams, train: bool) -> Result<NodeId> {
    let z = global_spectral_max_pool(tape, x)?;
    let a = conv_forward(tape, z, &p.squeeze, 1, 0)?;
    let a = tape.relu(a);
    let a = conv_forward(tape, a, &p.expand, 1, 0)?;
    let a = tape.relu(a);
    let a = conv_forward(tape, a, &p.descriptor, 1, 0)?;
    let a_d = tape.relu(a);
    let gated = tape.mul_channel(x, a_d)?;
    let mixed = conv_forward(tape, gated, &p.mix, 1, 0)?;
    let n = tape.batch_norm(mixed, p.bn.ids, train)?;
    Ok(tape.relu(n))
}

/// Spectral spatial attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsaParams {
    /// 2x2 stride-2 projection of the high-resolution map: `p/2 -> p`.
    pub down: ConvParams,
    /// `1 x 1` lateral projection of the low-resolution map: `p -> p`.
    pub lateral: ConvParams,
    pub bn_context: BnParams,
    /// `1 x 1` squeeze of the context to a single channel.
    pub gate: ConvParams,
    /// `1 x 1` output mix `p/2 -> p/2`.
    pub out: ConvParams,
    pub bn_out: BnParams,
    pub activation: GateActivation,
}

pub fn init_ssa(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    p: usize,
    activation: GateActivation,
) -> Result<SsaParams> {
    if p % 2 != 0 {
        return Err(CoreError::config(format!(
            "spatial attention needs an even channel count, got {p}"
        )));
    }
    let half = p / 2;
    let down = init_conv(store, rng, &format!("{prefix}.down"), 2, half, p)?;
    let lateral = init_conv(store, rng, &format!("{prefix}.lat"), 1, p, p)?;
    let bn_context = init_bn(store, &format!("{prefix}.bnc"), p)?;
    let gate = init_conv(store, rng, &format!("{prefix}.gate"), 1, p, 1)?;
    let out = init_conv(store, rng, &format!("{prefix}.out"), 1, half, half)?;
    let bn_out = init_bn(store, &format!("{prefix}.bno"), half)?;
    Ok(SsaParams {
        down,
        lateral,
        bn_context,
        gate,
        out,
        bn_out,
        activation,
    })
}

/// Spatial attention: `f_low` is the reconciled decoder context `(m,n,p)`,
/// `f_high` the SDA output `(2m,2n,p/2)`; the result is `(2m,2n,p/2)`.
pub fn ssa_forward(
    tape: &mut Tape,
    f_low: NodeId,
    f_high: NodeId,
    p: &SsaParams,
    train: bool,
) -> Result<NodeId> {
    let (m, n, pc) = tape.value(f_low).shape().whd()?;
    let (hw, hh, hc) = tape.value(f_high).shape().whd()?;
    if (hw, hh) != (2 * m, 2 * n) || pc != 2 * hc {
        return Err(CoreError::shape(format!(
            "spatial attention needs ({},{},{}) against ({},{},{}) in a 2:1/1:2 relation",
            hw, hh, hc, m, n, pc
        )));
    }
    let down = conv_forward(tape, f_high, &p.down, 2, 0)?;
    let lat = conv_forward(tape, f_low, &p.lateral, 1, 0)?;
    let sum = tape.add(down, lat)?;
    let ctx = tape.batch_norm(sum, p.bn_context.ids, train)?;
    let ctx = tape.relu(ctx);
    let g = conv_forward(tape, ctx, &p.gate, 1, 0)?;
    let g = match p.activation {
        GateActivation::Sigmoid => tape.sigmoid(g),
        GateActivation::Relu => tape.relu(g),
    };
    let a_s = tape.upsample2x(g)?;
    let gated = tape.mul_pixel(f_high, a_s)?;
    let mixed = conv_forward(tape, gated, &p.out, 1, 0)?;
    tape.batch_norm(mixed, p.bn_out.ids, train)
}

/// One SSD-equipped skip connection.
#[derive(Clone, Copy, Debug)]
pub struct SsdParams {
    /// `1 x 1` projection of the decoder context to `2c` channels;
    /// absent when the context already has `2c`.
    pub reconcile: Option<ConvParams>,
    pub sda: SdaParams,
    pub ssa: SsaParams,
}

pub fn init_ssd(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    c_decoder: usize,
    activation: GateActivation,
) -> Result<SsdParams> {
    let reconcile = if c_decoder != 2 * c {
        Some(init_conv(store, rng, &format!("{prefix}.rec"), 1, c_decoder, 2 * c)?)
    } else {
        None
    };
    let sda = init_sda(store, rng, &format!("{prefix}.sda"), c)?;
    let ssa = init_ssa(store, rng, &format!("{prefix}.ssa"), 2 * c, activation)?;
    Ok(SsdParams { reconcile, sda, ssa })
}

/// Refine `encoder (2m,2n,c)` under `decoder_context (m,n,c_d)` into a
/// `(2m,2n,c)` map ready for concatenation.
pub fn ssd_forward(
    tape: &mut Tape,
    encoder: NodeId,
    decoder_context: NodeId,
    p: &SsdParams,
    train: bool,
) -> Result<NodeId> {
    let (ew, eh, _c) = tape.value(encoder).shape().whd()?;
    let (dw, dh, _cd) = tape.value(decoder_context).shape().whd()?;
    if (ew, eh) != (2 * dw, 2 * dh) {
        return Err(CoreError::shape(format!(
            "SSD skip needs the decoder context at half the encoder extent, got ({ew},{eh}) vs ({dw},{dh})"
        )));
    }
    let f_low = match &p.reconcile {
        Some(rec) => conv_forward(tape, decoder_context, rec, 1, 0)?,
        None => decoder_context,
    };
    let f_d = sda_forward(tape, encoder, &p.sda, train)?;
    ssa_forward(tape, f_low, f_d, &p.ssa, train)
}
