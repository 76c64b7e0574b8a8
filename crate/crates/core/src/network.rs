//! RAIU-Net assembly, the two-stage CHS cascade, parameter census and
//! checkpoint serialisation.
//!
//! A RAIU-Net is a U-shaped encoder/decoder: `stages` stage blocks with
//! learned downsampling between them, a mirrored decoder driven by 2x2
//! stride-2 transposed convolutions, attention-refined (or direct) skip
//! concatenations, and a sigmoid `1 x 1` head. Stage widths follow
//! `base_filters * depth_growth^i`, rounded to the nearest multiple of
//! four. The ablation toggles swap residual inception blocks for plain
//! double-conv blocks (`use_rib`), hybrid pooling for plain max pooling
//! (`use_hybrid_pool`), and SSD attention skips for direct concatenation
//! (`use_ssd`); with all three off the network is the plain U-Net
//! baseline.
//!
//! The cascade runs two RAIU-Nets in series: the first emits the lung
//! contour map, the second consumes a coupled view of the input (by
//! default the input masked by the lung map) and emits the infection
//! mask. Both nets share one [`ParamStore`] under the `net1.` / `net2.`
//! prefixes, so the cascade trains jointly end to end.
//!
//! Batch handling is sample-at-a-time: batch norm normalises over the
//! spatial axes of each sample, and the trainer folds the recorded batch
//! statistics into the running estimates in a fixed order, keeping every
//! result independent of batch assembly.
//!
//! Checkpoints serialise the configuration and every named parameter
//! tensor (little-endian 64-bit floats) behind the magic `CHSN\x01`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::attention::{init_ssd, ssd_forward, GateActivation, SsdParams};
use crate::blocks::{
    conv_forward, downsample_forward, init_conv, init_double_conv, init_hybrid_pool, init_rib,
    stage_forward, ConvParams, DownsampleParams, StageBlock,
};
use crate::error::{CoreError, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Shape, Tensor};

/// What the second cascade stage consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Elementwise product of the input slice and the lung map (default).
    MaskedSlice,
    /// The raw lung sigmoid map alone.
    LungMap,
    /// Input slice and lung map stacked as two channels.
    ConcatSlice,
}

impl Coupling {
    pub fn name(self) -> &'static str {
        match self {
            Coupling::MaskedSlice => "masked",
            Coupling::LungMap => "map",
            Coupling::ConcatSlice => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Coupling::MaskedSlice),
            "map" => Ok(Coupling::LungMap),
            "concat" => Ok(Coupling::ConcatSlice),
            other => Err(CoreError::config(format!(
                "unknown coupling '{other}' (expected masked|map|concat)"
            ))),
        }
    }
}

/// Which model a checkpoint holds: the full cascade or a single RAIU-Net
/// trained for direct segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Chs,
    Raiu,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Chs => "chs",
            ModelKind::Raiu => "raiu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chs" => Ok(ModelKind::Chs),
            "raiu" => Ok(ModelKind::Raiu),
            other => Err(CoreError::config(format!(
                "unknown model kind '{other}' (expected chs|raiu)"
            ))),
        }
    }
}

/// Architecture hyperparameters and ablation toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    pub base_filters: usize,
    pub depth_growth: Real,
    pub input_w: usize,
    pub input_h: usize,
    pub use_rib: bool,
    pub use_hybrid_pool: bool,
    pub use_ssd: bool,
    /// Dropout rate used when sampling for MC uncertainty.
    pub dropout_rate: Real,
    pub gate_activation: GateActivation,
    pub coupling: Coupling,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stages: 4,
            // With four stages and 1.5× depth growth, 72 base filters put
            // the single-net trainable census at 4.10M and the cascade at
            // 8.21M.
            base_filters: 72,
            depth_growth: 1.5,
            input_w: 256,
            input_h: 256,
            use_rib: true,
            use_hybrid_pool: true,
            use_ssd: true,
            dropout_rate: 0.5,
            gate_activation: GateActivation::Sigmoid,
            coupling: Coupling::MaskedSlice,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CoreError::config(format!(
            "{key}: expected true|false, got '{other}'"
        ))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| CoreError::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_real(key: &str, v: &str) -> Result<Real> {
    v.parse()
        .map_err(|_| CoreError::config(format!("{key}: expected a number, got '{v}'")))
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(CoreError::config(format!(
                "stages must be >= 2, got {}",
                self.stages
            )));
        }
        if self.base_filters < 4 {
            return Err(CoreError::config(format!(
                "base_filters must be >= 4 (four inception branches), got {}",
                self.base_filters
            )));
        }
        if !(self.depth_growth > 0.0) {
            return Err(CoreError::config(format!(
                "depth_growth must be positive, got {}",
                self.depth_growth
            )));
        }
        let div = 1usize << self.stages;
        if self.input_w == 0 || self.input_h == 0 || self.input_w % div != 0 || self.input_h % div != 0
        {
            return Err(CoreError::config(format!(
                "input extents ({},{}) must be positive multiples of 2^stages = {div}",
                self.input_w, self.input_h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::config(format!(
                "dropout_rate {} must lie in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Set one field from its textual key; unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stages" => self.stages = parse_usize(key, value)?,
            "base_filters" => self.base_filters = parse_usize(key, value)?,
            "depth_growth" => self.depth_growth = parse_real(key, value)?,
            "input_w" => self.input_w = parse_usize(key, value)?,
            "input_h" => self.input_h = parse_usize(key, value)?,
            "input_size" => {
                let n = parse_usize(key, value)?;
                self.input_w = n;
                self.input_h = n;
            }
            "use_rib" => self.use_rib = parse_bool(key, value)?,
            "use_hybrid_pool" => self.use_hybrid_pool = parse_bool(key, value)?,
            "use_ssd" => self.use_ssd = parse_bool(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_real(key, value)?,
            "gate_activation" => {
                self.gate_activation = match value {
                    "sigmoid" => GateActivation::Sigmoid,
                    "relu" => GateActivation::Relu,
                    other => {
                        return Err(CoreError::config(format!(
                            "gate_activation: expected sigmoid|relu, got '{other}'"
                        )))
                    }
                }
            }
            "coupling" => self.coupling = Coupling::parse(value)?,
            other => {
                return Err(CoreError::config(format!(
                    "unknown network configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Stable key/value listing (used by checkpoints and config echo).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let gate = match self.gate_activation {
            GateActivation::Sigmoid => "sigmoid",
            GateActivation::Relu => "relu",
        };
        alloc::vec![
            ("stages", self.stages.to_string()),
            ("base_filters", self.base_filters.to_string()),
            ("depth_growth", format!("{}", self.depth_growth)),
            ("input_w", self.input_w.to_string()),
            ("input_h", self.input_h.to_string()),
            ("use_rib", self.use_rib.to_string()),
            ("use_hybrid_pool", self.use_hybrid_pool.to_string()),
            ("use_ssd", self.use_ssd.to_string()),
            ("dropout_rate", format!("{}", self.dropout_rate)),
            ("gate_activation", gate.to_string()),
            ("coupling", self.coupling.name().to_string()),
        ]
    }

    /// Per-stage filter widths: `base * growth^i` rounded to the nearest
    /// multiple of four (at least four).
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.stages);
        let mut w = self.base_filters as Real;
        for _ in 0..self.stages {
            let rounded = ((w / 4.0) + 0.5) as usize * 4;
            widths.push(rounded.max(4));
            w *= self.depth_growth;
        }
        widths
    }
}

/// Forward execution mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics in batch norm; dropout at the given rate (0 by
    /// default — training-time dropout is an explicit opt-in).
    Train { dropout: Real },
    /// Running statistics; no dropout.
    Infer,
    /// Running statistics with dropout active: one MC sample.
    Sample { dropout: Real },
}

impl Mode {
    fn bn_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    fn dropout(self) -> Real {
        match self {
            Mode::Train { dropout } | Mode::Sample { dropout } => dropout,
            Mode::Infer => 0.0,
        }
    }
}

/// 2x2 stride-2 transposed convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct TconvParams {
    pub w: ParamId,
    pub b: ParamId,
}

fn init_tconv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_d: usize,
    out_d: usize,
) -> Result<TconvParams> {
    // At stride 2 each output pixel receives exactly one tap per input
    // channel, so the effective fan-in is in_d.
    let w = store.add(
        format!("{prefix}.w"),
        he_normal(rng, Shape::d4(2, 2, out_d, in_d), in_d),
        true,
    )?;
    let b = store.add(format!("{prefix}.b"), Tensor::zeros(Shape::d1(out_d)), true)?;
    Ok(TconvParams { w, b })
}

/// Skip connection flavour.
#[derive(Clone, Debug)]
pub enum SkipParams {
    Direct,
    Ssd(SsdParams),
}

/// One encoder/decoder network with a sigmoid head.
pub struct RaiuNet {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub stages: usize,
    pub enc: Vec<StageBlock>,
    pub downs: Vec<DownsampleParams>,
    pub ups: Vec<TconvParams>,
    pub skips: Vec<SkipParams>,
    pub dec: Vec<StageBlock>,
    pub head: ConvParams,
}

/// Head outputs of one forward pass.
pub struct RaiuOut {
    /// Sigmoid probabilities in `[0,1]`.
    pub prob: NodeId,
    /// Pre-sigmoid logits.
    pub logits: NodeId,
}

impl RaiuNet {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &NetworkConfig,
        prefix: &str,
        in_channels: usize,
    ) -> Result<RaiuNet> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let s = cfg.stages;
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, d: usize, r: usize| {
            if cfg.use_rib {
                Ok::<StageBlock, CoreError>(StageBlock::Rib(init_rib(
                    store,
                    rng,
                    &name,
                    d,
                    r,
                    cfg.use_hybrid_pool,
                    true,
                )?))
            } else {
                Ok(StageBlock::Plain(init_double_conv(store, rng, &name, d, r)?))
            }
        };

        let mut enc = Vec::with_capacity(s);
        for i in 0..s {
            let d = if i == 0 { in_channels } else { widths[i - 1] };
            enc.push(block(store, rng, format!("{prefix}.enc{i}"), d, widths[i])?);
        }
        let mut downs = Vec::with_capacity(s - 1);
        for (i, &w) in widths.iter().enumerate().take(s - 1) {
            downs.push(if cfg.use_hybrid_pool {
                DownsampleParams::Hybrid(init_hybrid_pool(
                    store,
                    rng,
                    &format!("{prefix}.down{i}"),
                    w,
                    w,
                )?)
            } else {
                DownsampleParams::Max
            });
        }
        let mut ups = Vec::with_capacity(s - 1);
        let mut skips = Vec::with_capacity(s - 1);
        let mut dec = Vec::with_capacity(s - 1);
        for i in 0..s - 1 {
            ups.push(init_tconv(
                store,
                rng,
                &format!("{prefix}.up{i}"),
                widths[i + 1],
                widths[i],
            )?);
            skips.push(if cfg.use_ssd {
                SkipParams::Ssd(init_ssd(
                    store,
                    rng,
                    &format!("{prefix}.skip{i}"),
                    widths[i],
                    widths[i + 1],
                    cfg.gate_activation,
                )?)
            } else {
                SkipParams::Direct
            });
            dec.push(block(
                store,
                rng,
                format!("{prefix}.dec{i}"),
                2 * widths[i],
                widths[i],
            )?);
        }
        let head = init_conv(store, rng, &format!("{prefix}.head"), 1, widths[0], 1)?;
        Ok(RaiuNet {
            widths,
            in_channels,
            stages: s,
            enc,
            downs,
            ups,
            skips,
            dec,
            head,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<RaiuOut> {
        let (w, h, d) = tape.value(x).shape().whd()?;
        if d != self.in_channels {
            return Err(CoreError::shape(format!(
                "network expects {} input channels, got {d}",
                self.in_channels
            )));
        }
        let div = 1usize << (self.stages - 1);
        if w % div != 0 || h % div != 0 {
            return Err(CoreError::shape(format!(
                "input extents ({w},{h}) must be multiples of {div} for {} stages",
                self.stages
            )));
        }
        let train = mode.bn_train();
        let rate = mode.dropout();

        let mut skip_feats = Vec::with_capacity(self.stages - 1);
        let mut cur = x;
        for i in 0..self.stages {
            cur = stage_forward(tape, cur, &self.enc[i], train)?;
            cur = tape.dropout(cur, rate, rng)?;
            if i < self.stages - 1 {
                skip_feats.push(cur);
                cur = downsample_forward(tape, cur, &self.downs[i])?;
            }
        }
        for i in (0..self.stages - 1).rev() {
            let context = cur;
            let up = tape.tconv(context, self.ups[i].w, self.ups[i].b, 2)?;
            let skip = match &self.skips[i] {
                SkipParams::Direct => skip_feats[i],
                SkipParams::Ssd(p) => ssd_forward(tape, skip_feats[i], context, p, train)?,
            };
            let cat = tape.concat(&[skip, up])?;
            cur = stage_forward(tape, cat, &self.dec[i], train)?;
            cur = tape.dropout(cur, rate, rng)?;
        }
        let logits = conv_forward(tape, cur, &self.head, 1, 0)?;
        let prob = tape.sigmoid(logits);
        Ok(RaiuOut { prob, logits })
    }
}

/// The two-stage cascade.
pub struct ChsNet {
    pub net1: RaiuNet,
    pub net2: RaiuNet,
    pub coupling: Coupling,
}

/// Cascade head outputs.
pub struct ChsOut {
    pub lung: RaiuOut,
    pub infection: RaiuOut,
}

impl ChsNet {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Result<ChsNet> {
        let net1 = RaiuNet::build(store, rng, cfg, "net1", 1)?;
        let stage2_channels = match cfg.coupling {
            Coupling::MaskedSlice | Coupling::LungMap => 1,
            Coupling::ConcatSlice => 2,
        };
        let net2 = RaiuNet::build(store, rng, cfg, "net2", stage2_channels)?;
        Ok(ChsNet {
            net1,
            net2,
            coupling: cfg.coupling,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ChsOut> {
        let lung = self.net1.forward(tape, x, mode, rng)?;
        let stage2_in = match self.coupling {
            Coupling::MaskedSlice => tape.mul(x, lung.prob)?,
            Coupling::LungMap => lung.prob,
            Coupling::ConcatSlice => tape.concat(&[x, lung.prob])?,
        };
        let infection = self.net2.forward(tape, stage2_in, mode, rng)?;
        Ok(ChsOut { lung, infection })
    }
}

/// A trainable model: the cascade, or a single net segmenting directly.
pub enum Model {
    Chs(ChsNet),
    Raiu(RaiuNet),
}

/// Uniform head view across model kinds.
pub struct ModelOut {
    /// Lung head (absent for direct single-net segmentation).
    pub lung: Option<RaiuOut>,
    pub infection: RaiuOut,
}

impl Model {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &NetworkConfig,
        kind: ModelKind,
    ) -> Result<Model> {
        Ok(match kind {
            ModelKind::Chs => Model::Chs(ChsNet::build(store, rng, cfg)?),
            ModelKind::Raiu => Model::Raiu(RaiuNet::build(store, rng, cfg, "net1", 1)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Chs(_) => ModelKind::Chs,
            Model::Raiu(_) => ModelKind::Raiu,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOut> {
        match self {
            Model::Chs(net) => {
                let out = net.forward(tape, x, mode, rng)?;
                Ok(ModelOut {
                    lung: Some(out.lung),
                    infection: out.infection,
                })
            }
            Model::Raiu(net) => {
                let out = net.forward(tape, x, mode, rng)?;
                Ok(ModelOut {
                    lung: None,
                    infection: out,
                })
            }
        }
    }
}

/// One census row: a named parameter tensor and its size.
pub struct CensusRow {
    pub name: String,
    pub shape: String,
    pub count: usize,
    pub trainable: bool,
}

pub struct Census {
    pub rows: Vec<CensusRow>,
    pub total: usize,
    pub trainable: usize,
}

/// Exact per-tensor parameter counts in registration order.
pub fn parameter_census(store: &ParamStore) -> Census {
    let mut rows = Vec::new();
    let mut total = 0;
    let mut trainable = 0;
    for (_, entry) in store.iter() {
        let count = entry.value.numel();
        total += count;
        if entry.trainable {
            trainable += count;
        }
        rows.push(CensusRow {
            name: entry.name.clone(),
            shape: entry.value.shape().to_string(),
            count,
            trainable: entry.trainable,
        });
    }
    Census {
        rows,
        total,
        trainable,
    }
}

/// Depthwise-separable layers found in the store, with their Eq-style
/// cost ratio: `(name, f, d, r, ratio)`.
pub fn dsc_ratio_table(store: &ParamStore) -> Vec<(String, usize, usize, usize, Real)> {
    let mut out = Vec::new();
    for (_, entry) in store.iter() {
        if let Some(prefix) = entry.name.strip_suffix(".dw") {
            let dims = entry.value.shape().dims();
            let (f, d) = (dims[0], dims[2]);
            if let Some(pw) = store.find(&format!("{prefix}.pw")) {
                let r = store.get(pw).shape().dims()[3];
                let (ratio, _, _) = crate::blocks::dsc_cost_ratio(f, d, r);
                out.push((String::from(prefix), f, d, r, ratio));
            }
        }
    }
    out
}

/// Checkpoint magic: "CHSN" plus a format version byte.
pub const CHECKPOINT_MAGIC: [u8; 5] = *b"CHSN\x01";

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(CoreError::format("checkpoint truncated"));
    }
    let v = u32::from_le_bytes([bytes[*pos], bytes[*pos + 1], bytes[*pos + 2], bytes[*pos + 3]]);
    *pos = end;
    Ok(v)
}

fn read_slice<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = *pos + len;
    if end > bytes.len() {
        return Err(CoreError::format("checkpoint truncated"));
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Serialise a model checkpoint: magic, config block, then every
/// parameter tensor in registration order.
pub fn save_checkpoint(cfg: &NetworkConfig, kind: ModelKind, store: &ParamStore) -> Vec<u8> {
    let mut blob = String::new();
    blob.push_str(&format!("kind={}\n", kind.name()));
    for (k, v) in cfg.entries() {
        blob.push_str(&format!("{k}={v}\n"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, blob.len() as u32);
    buf.extend_from_slice(blob.as_bytes());
    push_u32(&mut buf, store.len() as u32);
    for (_, entry) in store.iter() {
        push_u32(&mut buf, entry.name.len() as u32);
        buf.extend_from_slice(entry.name.as_bytes());
        buf.push(entry.trainable as u8);
        let dims = entry.value.shape().dims();
        buf.push(dims.len() as u8);
        for d in dims {
            push_u32(&mut buf, *d as u32);
        }
        for v in entry.value.data() {
            buf.extend_from_slice(&(*v as f64).to_le_bytes());
        }
    }
    buf
}

/// Parse a checkpoint and rebuild the model it describes; the returned
/// store holds the saved values.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(NetworkConfig, ModelKind, ParamStore, Model)> {
    let mut pos = 0;
    let magic = read_slice(bytes, &mut pos, CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::format(
            "not a checkpoint: bad magic header",
        ));
    }
    let blob_len = read_u32(bytes, &mut pos)? as usize;
    let blob = core::str::from_utf8(read_slice(bytes, &mut pos, blob_len)?)
        .map_err(|_| CoreError::format("checkpoint config block is not UTF-8"))?;
    let mut cfg = NetworkConfig::default();
    let mut kind = None;
    for line in blob.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::format(format!("malformed checkpoint config line '{line}'")))?;
        if k == "kind" {
            kind = Some(ModelKind::parse(v)?);
        } else {
            cfg.set(k, v)?;
        }
    }
    let kind = kind.ok_or_else(|| CoreError::format("checkpoint missing model kind"))?;

    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(0, crate::rng::tag::INIT, 0);
    let model = Model::build(&mut store, &mut rng, &cfg, kind)?;

    let count = read_u32(bytes, &mut pos)? as usize;
    if count != store.len() {
        return Err(CoreError::format(format!(
            "checkpoint has {count} tensors but the configuration builds {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(bytes, &mut pos)? as usize;
        let name = core::str::from_utf8(read_slice(bytes, &mut pos, name_len)?)
            .map_err(|_| CoreError::format("checkpoint tensor name is not UTF-8"))?
            .to_string();
        let _trainable = read_slice(bytes, &mut pos, 1)?[0];
        let rank = read_slice(bytes, &mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(bytes, &mut pos)? as usize);
        }
        let shape = Shape(dims);
        let numel = shape.numel();
        let raw = read_slice(bytes, &mut pos, numel * 8)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            data.push(f64::from_le_bytes(b) as Real);
        }
        let id = store.find(&name).ok_or_else(|| {
            CoreError::format(format!("checkpoint tensor '{name}' not present in this model"))
        })?;
        if store.get(id).shape() != &shape {
            return Err(CoreError::format(format!(
                "checkpoint tensor '{name}' has shape {} but the model expects {}",
                shape,
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = Tensor::new(shape, data)?;
    }
    if pos != bytes.len() {
        return Err(CoreError::format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok((cfg, kind, store, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            stages: 2,
            base_filters: 8,
            input_w: 16,
            input_h: 16,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_widths_grow_by_half_rounded_to_fours() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.stage_widths(), &[72, 108, 164, 244]);
        let doubled = NetworkConfig {
            base_filters: 32,
            depth_growth: 2.0,
            ..NetworkConfig::default()
        };
        assert_eq!(doubled.stage_widths(), &[32, 64, 128, 256]);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = NetworkConfig::default();
        cfg.stages = 1;
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::default();
        cfg.input_w = 100; // not a multiple of 16
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::default();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_set_round_trips_entries() {
        let cfg = tiny_cfg();
        let mut rebuilt = NetworkConfig::default();
        for (k, v) in cfg.entries() {
            rebuilt.set(k, &v).unwrap();
        }
        assert_eq!(cfg, rebuilt);
        assert!(rebuilt.set("no_such_key", "1").is_err());
    }

    #[test]
    fn miniature_net_emits_unit_range_map() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, rng::tag::INIT, 0);
        let net = RaiuNet::build(&mut store, &mut r, &cfg, "net1", 1).unwrap();
        let mut tape = Tape::new(&store);
        let mut dr = rng::stream(1, rng::tag::DROPOUT, 0);
        let mut xr = rng::stream(2, rng::tag::CHECK, 0);
        let x = tape.leaf(Tensor::from_fn(Shape::d3(16, 16, 1), |_| {
            use rand::Rng;
            xr.random::<Real>()
        }));
        let out = net.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
        let t = tape.value(out.prob);
        assert_eq!(t.shape().dims(), &[16, 16, 1]);
        assert!(t.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, rng::tag::INIT, 0);
        let _net = Model::build(&mut store, &mut r, &cfg, ModelKind::Chs).unwrap();
        let bytes = save_checkpoint(&cfg, ModelKind::Chs, &store);
        let (cfg2, kind2, store2, _model2) = load_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(kind2, ModelKind::Chs);
        assert_eq!(store.len(), store2.len());
        for (id, entry) in store.iter() {
            assert_eq!(entry.value.data(), store2.get(id).data(), "{}", entry.name);
        }
        let bytes2 = save_checkpoint(&cfg2, kind2, &store2);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, rng::tag::INIT, 0);
        let _ = Model::build(&mut store, &mut r, &cfg, ModelKind::Raiu).unwrap();
        let mut bytes = save_checkpoint(&cfg, ModelKind::Raiu, &store);
        bytes[0] = b'X';
        assert!(load_checkpoint(&bytes).is_err());
        let bytes = save_checkpoint(&cfg, ModelKind::Raiu, &store);
        assert!(load_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn baseline_census_has_no_specialised_parameters() {
        let mut cfg = tiny_cfg();
        cfg.use_rib = false;
        cfg.use_hybrid_pool = false;
        cfg.use_ssd = false;
        let mut store = ParamStore::new();
        let mut r = rng::stream(5, rng::tag::INIT, 0);
        let _ = RaiuNet::build(&mut store, &mut r, &cfg, "net1", 1).unwrap();
        for (_, entry) in store.iter() {
            let n = &entry.name;
            assert!(
                !n.contains(".dw") && !n.contains(".sda.") && !n.contains(".ssa.")
                    && !n.contains(".pool") && !n.contains(".mix"),
                "baseline contains specialised parameter {n}"
            );
        }
    }

    #[test]
    fn toggles_strictly_add_parameters() {
        let base = {
            let mut cfg = tiny_cfg();
            cfg.use_rib = false;
            cfg.use_hybrid_pool = false;
            cfg.use_ssd = false;
            cfg
        };
        let count = |cfg: &NetworkConfig| {
            let mut store = ParamStore::new();
            let mut r = rng::stream(6, rng::tag::INIT, 0);
            let _ = RaiuNet::build(&mut store, &mut r, cfg, "net1", 1).unwrap();
            parameter_census(&store).trainable
        };
        let c0 = count(&base);
        for field in ["use_rib", "use_hybrid_pool", "use_ssd"] {
            let mut cfg = base.clone();
            cfg.set(field, "true").unwrap();
            assert!(count(&cfg) > c0, "{field} did not add parameters");
        }
    }
}
