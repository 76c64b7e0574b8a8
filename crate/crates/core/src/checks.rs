//! Gradient self-diagnostics: every differentiable operation and block
//! checked against central finite differences.
//!
//! Simple ops get exhaustive per-coordinate checks. Composite blocks use
//! a deterministic random subset of coordinates per parameter tensor —
//! the estimator is unchanged, only the coordinate list shrinks. The
//! full cascade is verified two ways: the same sampled per-coordinate
//! checks (every input pixel plus a coordinate sample per parameter
//! tensor), and directional derivatives — the dot product of an entire
//! gradient with a fixed unit direction compared against
//! `(L(θ+εd) − L(θ−εd)) / 2ε`, which exercises all coordinates of every
//! tensor at once.
//!
//! Central differences are only valid on a smooth piece of the function,
//! so the checks control the evaluation point: inputs that feed
//! max-style selections come from a spaced lattice so a perturbation of
//! `ε` can never flip a winner, and composite blocks are checked at a
//! randomised parameter point ([`randomize_store`]) rather than at their
//! freshly initialised one, where zero biases can pin activation chains
//! exactly on the ReLU kink and feed batch normalisation constant maps.
//! Coordinates whose analytic and numeric derivatives both sit below the
//! finite-difference noise floor are accepted as matching zeros (see
//! [`crate::tape::GRAD_NOISE_FLOOR`]), and coordinates that disagree at
//! the nominal step are retried at smaller steps, since deep
//! compositions mix curvature scales no single step can satisfy.
//! Tolerances are graded by depth: machine-level for linear ops, `1e-4`
//! for composite blocks and the per-coordinate cascade check, `1e-3`
//! only for the directional cascade check, whose whole-tensor steps
//! leave less room between activation boundaries and roundoff.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{init_sda, init_ssa, init_ssd, sda_forward, ssa_forward, ssd_forward, GateActivation};
use crate::blocks::{
    dsc_forward, hybrid_pool_forward, ic_forward, init_bn, init_dsc, init_hybrid_pool, init_ic,
    init_rib, rib_forward,
};
use crate::error::Result;
use crate::loss::{cascade_loss, segmentation_loss};
use crate::math::maxr;
use crate::network::{Mode, Model, ModelKind, NetworkConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::spectral::PoolMode;
use crate::tape::{grad_check, grad_check_params, relative_error, NodeId, Reduction, Tape};
use crate::tensor::{Real, Shape, Tensor};

/// Finite-difference step for per-coordinate checks.
pub const COORD_EPS: Real = 1e-5;
/// Finite-difference step for directional cascade checks. A direction
/// perturbs every coordinate of a tensor at once, so the step must stay
/// below the distance to the nearest activation boundary (ReLU kink or
/// pool-winner flip) anywhere in the network; at `5e-7` every direction
/// sits on one smooth piece and the residual error is roundoff-limited
/// near `1e-8`.
pub const DIRECTIONAL_EPS: Real = 5e-7;
/// Tolerance for linear and elementwise-smooth ops.
pub const TOL_SIMPLE: Real = 1e-6;
/// Tolerance for normalisation and loss surfaces.
pub const TOL_SMOOTH: Real = 1e-5;
/// Tolerance for composite blocks.
pub const TOL_BLOCK: Real = 1e-4;
/// Tolerance for the end-to-end cascade directional check.
pub const TOL_CASCADE: Real = 1e-3;

/// Outcome of one named check.
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: Real,
    pub tolerance: Real,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::tag::CHECK, 11);
    Tensor::from_fn(shape, |_| r.random::<Real>() * 2.0 - 1.0)
}

/// Values on a spaced lattice: all distinct, minimum gap 0.01, so an
/// `ε = 1e-5` nudge cannot change any max-pool winner.
fn lattice_tensor(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 293) as Real / 100.0 - 1.4)
}

fn prob_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::tag::CHECK, 12);
    Tensor::from_fn(shape, |_| 0.1 + 0.8 * r.random::<Real>())
}

fn binary_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::tag::CHECK, 13);
    Tensor::from_fn(shape, |_| if r.random::<Real>() < 0.5 { 0.0 } else { 1.0 })
}

/// Values bounded away from the ReLU kink: `0.1 <= |v| <= 0.9`.
fn away_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::tag::CHECK, 14);
    Tensor::from_fn(shape, |i| {
        let mag = 0.1 + 0.8 * r.random::<Real>();
        if i % 2 == 0 {
            mag
        } else {
            -mag
        }
    })
}

fn trainable_ids(store: &ParamStore) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect()
}

/// Move every stored tensor to a generic point in parameter space.
///
/// A freshly initialised network is a degenerate point for finite
/// differences: biases start at zero, so an unlucky weight sign can pin a
/// whole squeeze-and-excite chain at exactly the ReLU kink, and a gate of
/// exactly zero then feeds batch normalisation a constant map whose
/// variance sits at the non-smooth minimum of `sqrt(var + eps)`. The true
/// subgradient there is zero while a central difference sees the
/// one-sided explosion, so the comparison is meaningless. Checks on
/// composite blocks therefore redraw biases and shift parameters away
/// from zero first; scale-like parameters are drawn positive near one.
fn randomize_store(store: &mut ParamStore, seed: u64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let mut r = rng::stream(seed, rng::tag::CHECK, 60 + k as u64);
        let name = store.entry(id).name.clone();
        let t = store.get_mut(id);
        if name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v = 0.6 + 0.8 * r.random::<Real>();
            }
        } else if name.ends_with(".run_var") {
            for v in t.data_mut() {
                *v = 0.5 + r.random::<Real>();
            }
        } else if name.ends_with(".run_mean") {
            for v in t.data_mut() {
                *v = 0.8 * r.random::<Real>() - 0.4;
            }
        } else if name.ends_with(".beta") || name.ends_with(".b") {
            for v in t.data_mut() {
                let mag = 0.05 + 0.3 * r.random::<Real>();
                *v = if r.random::<bool>() { mag } else { -mag };
            }
        }
        // Weight tensors keep their He-initialised draws: those are
        // already generic, and their scale matches the architecture.
    }
}

/// Collapse a tensor node to a scalar with fixed random weights so every
/// output coordinate influences the root.
fn collapse(tape: &mut Tape, node: NodeId, seed: u64) -> Result<NodeId> {
    let n = tape.value(node).numel();
    let mut r = rng::stream(seed, rng::tag::CHECK, 15);
    let weights: Vec<Real> = (0..n).map(|_| r.random::<Real>() * 2.0 - 1.0).collect();
    tape.weighted_sum(node, weights)
}

/// Check input and parameter gradients of one graph.
fn dual_check(
    name: &'static str,
    tolerance: Real,
    store: &ParamStore,
    x: &Tensor,
    build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
    sample: Option<(usize, u64)>,
) -> Result<CheckResult> {
    let input_err = grad_check(store, &build, x, COORD_EPS)?;
    let ids = trainable_ids(store);
    let param_err = if ids.is_empty() {
        0.0
    } else {
        grad_check_params(
            store,
            |tape| {
                let xi = tape.leaf(x.clone());
                build(tape, xi)
            },
            &ids,
            COORD_EPS,
            sample,
        )?
    };
    Ok(CheckResult {
        name,
        max_rel_err: maxr(input_err, param_err),
        tolerance,
    })
}

fn check_conv2d() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(Shape::d4(3, 3, 2, 3), 101), true)?;
    let b = store.add("b", rand_tensor(Shape::d1(3), 102), true)?;
    let x = rand_tensor(Shape::d3(5, 5, 2), 103);
    dual_check("conv2d", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.conv2d(xi, w, Some(b), 1, 1)?;
        collapse(tape, y, 104)
    }, None)
}

fn check_conv2d_strided() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(Shape::d4(3, 3, 2, 4), 111), true)?;
    let b = store.add("b", rand_tensor(Shape::d1(4), 112), true)?;
    let x = rand_tensor(Shape::d3(6, 6, 2), 113);
    dual_check("conv2d-strided", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.conv2d(xi, w, Some(b), 2, 1)?;
        collapse(tape, y, 114)
    }, None)
}

fn check_depthwise() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(Shape::d3(3, 3, 3), 121), true)?;
    let x = rand_tensor(Shape::d3(5, 5, 3), 122);
    dual_check("depthwise", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.depthwise(xi, w, 1, 1)?;
        collapse(tape, y, 123)
    }, None)
}

fn check_tconv(name: &'static str, stride: usize, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(Shape::d4(2, 2, 3, 2), seed), true)?;
    let b = store.add("b", rand_tensor(Shape::d1(3), seed + 1), true)?;
    let x = rand_tensor(Shape::d3(3, 3, 2), seed + 2);
    dual_check(name, TOL_SIMPLE, &store, &x, move |tape, xi| {
        let y = tape.tconv(xi, w, b, stride)?;
        collapse(tape, y, seed + 3)
    }, None)
}

fn check_batch_norm(name: &'static str, train: bool, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let bn = init_bn(&mut store, "bn", 3)?;
    *store.get_mut(bn.ids.gamma) = prob_tensor(Shape::d1(3), seed);
    *store.get_mut(bn.ids.beta) = rand_tensor(Shape::d1(3), seed + 1);
    *store.get_mut(bn.ids.run_mean) = rand_tensor(Shape::d1(3), seed + 2);
    *store.get_mut(bn.ids.run_var) = prob_tensor(Shape::d1(3), seed + 3);
    let x = rand_tensor(Shape::d3(4, 4, 3), seed + 4);
    dual_check(name, TOL_SMOOTH, &store, &x, move |tape, xi| {
        let y = tape.batch_norm(xi, bn.ids, train)?;
        collapse(tape, y, seed + 5)
    }, None)
}

fn check_relu() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = away_tensor(Shape::d3(4, 4, 2), 141);
    dual_check("relu", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.relu(xi);
        collapse(tape, y, 142)
    }, None)
}

fn check_sigmoid() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(4, 4, 2), 151);
    dual_check("sigmoid", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.sigmoid(xi);
        collapse(tape, y, 152)
    }, None)
}

fn check_max_pool_valid() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = lattice_tensor(Shape::d3(6, 6, 2));
    dual_check("max-pool-valid", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.max_pool(xi, 2, 2, PoolMode::Valid)?;
        collapse(tape, y, 161)
    }, None)
}

fn check_max_pool_same() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = lattice_tensor(Shape::d3(5, 5, 2));
    dual_check("max-pool-same", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.max_pool(xi, 3, 1, PoolMode::Same)?;
        collapse(tape, y, 162)
    }, None)
}

fn check_global_max() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = lattice_tensor(Shape::d3(4, 4, 3));
    dual_check("global-max", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.global_max(xi)?;
        collapse(tape, y, 163)
    }, None)
}

fn check_spectral_pool() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(6, 6, 2), 171);
    dual_check("spectral-pool", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.spectral_pool(xi, 3, 3)?;
        collapse(tape, y, 172)
    }, None)
}

fn check_spectral_lowpass() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(5, 5, 2), 173);
    dual_check("spectral-lowpass", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.spectral_lowpass(xi)?;
        collapse(tape, y, 174)
    }, None)
}

fn check_upsample() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(3, 3, 2), 181);
    dual_check("upsample-nearest", TOL_SIMPLE, &store, &x, |tape, xi| {
        let y = tape.upsample2x(xi)?;
        collapse(tape, y, 182)
    }, None)
}

fn check_elementwise() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(4, 4, 2), 191);
    dual_check("elementwise-ops", TOL_SIMPLE, &store, &x, |tape, xi| {
        let squared = tape.mul(xi, xi)?;
        let scaled = tape.scale(xi, 0.7);
        let summed = tape.add(xi, scaled)?;
        let cat = tape.concat(&[squared, summed])?;
        collapse(tape, cat, 192)
    }, None)
}

fn check_gating_channel() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = lattice_tensor(Shape::d3(4, 4, 3));
    dual_check("gating-channel", TOL_SIMPLE, &store, &x, |tape, xi| {
        let pooled = tape.global_max(xi)?;
        let gate = tape.sigmoid(pooled);
        let y = tape.mul_channel(xi, gate)?;
        collapse(tape, y, 201)
    }, None)
}

fn check_gating_pixel() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(4, 4, 1), 211);
    dual_check("gating-pixel", TOL_SIMPLE, &store, &x, |tape, xi| {
        let gate = tape.sigmoid(xi);
        let wide = tape.concat(&[xi, xi])?;
        let y = tape.mul_pixel(wide, gate)?;
        collapse(tape, y, 212)
    }, None)
}

fn check_dropout() -> Result<CheckResult> {
    let store = ParamStore::new();
    let x = rand_tensor(Shape::d3(4, 4, 2), 221);
    dual_check("dropout", TOL_SIMPLE, &store, &x, |tape, xi| {
        // Fixed stream per evaluation: the mask is identical on every
        // call, which finite differencing requires.
        let mut r = rng::stream(77, rng::tag::CHECK, 500);
        let y = tape.dropout(xi, 0.4, &mut r)?;
        collapse(tape, y, 222)
    }, None)
}

fn check_loss(name: &'static str, seed: u64, build_kind: u8) -> Result<CheckResult> {
    let store = ParamStore::new();
    let shape = Shape::d3(4, 4, 1);
    let x = prob_tensor(shape.clone(), seed);
    let target = binary_tensor(shape, seed + 1);
    dual_check(name, TOL_SMOOTH, &store, &x, move |tape, xi| {
        match build_kind {
            0 => tape.bce(xi, &target, Reduction::Mean),
            1 => tape.bce(xi, &target, Reduction::Sum),
            2 => tape.dice_loss(xi, &target),
            _ => segmentation_loss(tape, xi, &target, Reduction::Mean),
        }
    }, None)
}

fn check_dsc_block() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(231, rng::tag::CHECK, 16);
    let p = init_dsc(&mut store, &mut r, "dsc", 3, 3, 4)?;
    let x = rand_tensor(Shape::d3(4, 4, 3), 232);
    dual_check("dsc-block", TOL_BLOCK, &store, &x, move |tape, xi| {
        let y = dsc_forward(tape, xi, &p, 1, 1)?;
        collapse(tape, y, 233)
    }, Some((6, 234)))
}

fn check_inception_block() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(241, rng::tag::CHECK, 17);
    let p = init_ic(&mut store, &mut r, "ic", 4, 4, true)?;
    randomize_store(&mut store, 245);
    let x = rand_tensor(Shape::d3(4, 4, 4), 242);
    dual_check("inception-block", TOL_BLOCK, &store, &x, move |tape, xi| {
        let y = ic_forward(tape, xi, &p, true)?;
        collapse(tape, y, 243)
    }, Some((4, 244)))
}

fn check_residual_block() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(251, rng::tag::CHECK, 18);
    let p = init_rib(&mut store, &mut r, "rib", 4, 4, true, true)?;
    randomize_store(&mut store, 255);
    let x = rand_tensor(Shape::d3(4, 4, 4), 252);
    dual_check("residual-block", TOL_BLOCK, &store, &x, move |tape, xi| {
        let y = rib_forward(tape, xi, &p, true)?;
        collapse(tape, y, 253)
    }, Some((3, 254)))
}

fn check_hybrid_pool(name: &'static str, mode: PoolMode, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, rng::tag::CHECK, 19);
    let p = init_hybrid_pool(&mut store, &mut r, "hp", 2, 2)?;
    let x = lattice_tensor(Shape::d3(4, 4, 2));
    dual_check(name, TOL_BLOCK, &store, &x, move |tape, xi| {
        let y = hybrid_pool_forward(tape, xi, &p, mode)?;
        collapse(tape, y, seed + 1)
    }, None)
}

fn check_sda() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(261, rng::tag::CHECK, 20);
    let p = init_sda(&mut store, &mut r, "sda", 8)?;
    randomize_store(&mut store, 265);
    let x = lattice_tensor(Shape::d3(4, 4, 8));
    dual_check("attention-sda", TOL_BLOCK, &store, &x, move |tape, xi| {
        let y = sda_forward(tape, xi, &p, true)?;
        collapse(tape, y, 262)
    }, Some((5, 263)))
}

fn check_ssa() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(271, rng::tag::CHECK, 21);
    let p = init_ssa(&mut store, &mut r, "ssa", 8, GateActivation::Sigmoid)?;
    randomize_store(&mut store, 275);
    let x = lattice_tensor(Shape::d3(4, 4, 4));
    dual_check("attention-ssa", TOL_BLOCK, &store, &x, move |tape, xi| {
        // Derive the coarse feature from the fine one so a single input
        // exercises both attention arguments.
        let pooled = tape.max_pool(xi, 2, 2, PoolMode::Valid)?;
        let f_low = tape.concat(&[pooled, pooled])?;
        let y = ssa_forward(tape, f_low, xi, &p, true)?;
        collapse(tape, y, 272)
    }, Some((5, 273)))
}

fn check_ssd() -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(281, rng::tag::CHECK, 22);
    // Decoder context of 12 channels versus 2c = 8 forces the reconcile
    // projection onto the checked path.
    let p = init_ssd(&mut store, &mut r, "ssd", 4, 12, GateActivation::Sigmoid)?;
    randomize_store(&mut store, 285);
    let x = lattice_tensor(Shape::d3(4, 4, 4));
    dual_check("attention-ssd", TOL_BLOCK, &store, &x, move |tape, xi| {
        let pooled = tape.max_pool(xi, 2, 2, PoolMode::Valid)?;
        let context = tape.concat(&[pooled, pooled, pooled])?;
        let y = ssd_forward(tape, xi, context, &p, true)?;
        collapse(tape, y, 282)
    }, Some((5, 283)))
}

/// Directional analogue of the per-coordinate noise floor in
/// [`crate::tape::GRAD_NOISE_FLOOR`]: a directional derivative this small
/// is indistinguishable from roundoff at `DIRECTIONAL_EPS`.
fn below_noise(analytic: Real, numeric: Real) -> bool {
    crate::math::abs(analytic) < crate::tape::GRAD_NOISE_FLOOR
        && crate::math::abs(numeric) < crate::tape::GRAD_NOISE_FLOOR
}

fn unit_direction(n: usize, seed: u64, lane: u64) -> Vec<Real> {
    let mut r = rng::stream(seed, rng::tag::CHECK, lane);
    let mut d: Vec<Real> = (0..n).map(|_| r.random::<Real>() * 2.0 - 1.0).collect();
    let norm = crate::math::sqrt(d.iter().map(|v| v * v).sum::<Real>());
    if norm > 0.0 {
        for v in &mut d {
            *v /= norm;
        }
    } else {
        d[0] = 1.0;
    }
    d
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The shared cascade fixture: a miniature two-stage 16×16 model at a
/// generic parameter point plus one synthetic sample.
fn cascade_fixture() -> Result<(ParamStore, Model, crate::synth::SegmentationSample)> {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut ir = rng::stream(31, rng::tag::INIT, 0);
    let model = Model::build(&mut store, &mut ir, &cfg, ModelKind::Chs)?;
    randomize_store(&mut store, 305);
    let sample = crate::synth::synth_sample(
        &crate::synth::SynthConfig {
            n: 1,
            size: 16,
            seed: 77,
            ..Default::default()
        },
        0,
    )?;
    Ok((store, model, sample))
}

/// Per-coordinate finite differences on the full two-stage cascade loss:
/// every input pixel, plus a deterministic two-coordinate sample from
/// each trainable tensor.
fn check_cascade_coords() -> Result<CheckResult> {
    let (store, model, sample) = cascade_fixture()?;
    let build = |tape: &mut Tape, xi: NodeId| -> Result<NodeId> {
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = model.forward(tape, xi, Mode::Train { dropout: 0.0 }, &mut dr)?;
        let lung = out.lung.as_ref().expect("cascade has a lung head");
        cascade_loss(
            tape,
            lung.prob,
            &sample.lung_mask,
            out.infection.prob,
            &sample.infection_mask,
            Reduction::Mean,
        )
    };
    let input_err = grad_check(&store, &build, &sample.image, COORD_EPS)?;
    let ids = trainable_ids(&store);
    let param_err = grad_check_params(
        &store,
        |tape| {
            let xi = tape.leaf(sample.image.clone());
            build(tape, xi)
        },
        &ids,
        COORD_EPS,
        Some((2, 333)),
    )?;
    Ok(CheckResult {
        name: "cascade-coordinate",
        max_rel_err: maxr(input_err, param_err),
        tolerance: TOL_BLOCK,
    })
}

/// Directional derivative check of the full two-stage cascade loss.
fn check_cascade() -> Result<CheckResult> {
    let (store, model, sample) = cascade_fixture()?;

    let run = |s: &ParamStore, img: &Tensor, want_grads: bool| -> Result<(Real, Option<(crate::tape::Grads, Vec<Real>)>)> {
        let mut tape = Tape::new(s);
        let x = tape.leaf_with_grad(img.clone());
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = model.forward(&mut tape, x, Mode::Train { dropout: 0.0 }, &mut dr)?;
        let lung = out.lung.as_ref().expect("cascade has a lung head");
        let loss = cascade_loss(
            &mut tape,
            lung.prob,
            &sample.lung_mask,
            out.infection.prob,
            &sample.infection_mask,
            Reduction::Mean,
        )?;
        let value = tape.value(loss).data()[0];
        if !want_grads {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let gx = grads
            .node(x)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; img.numel()]);
        Ok((value, Some((grads, gx))))
    };

    let (_, base) = run(&store, &sample.image, true)?;
    let (grads, gx) = base.expect("gradients requested");
    let eps = DIRECTIONAL_EPS;
    let mut worst: Real = 0.0;

    // Input direction.
    {
        let d = unit_direction(sample.image.numel(), 300, 0);
        let analytic = dot(&gx, &d);
        let perturb = |sign: Real| -> Result<Real> {
            let data: Vec<Real> = sample
                .image
                .data()
                .iter()
                .zip(&d)
                .map(|(v, di)| v + sign * eps * di)
                .collect();
            let img = Tensor::new(sample.image.shape().clone(), data)?;
            Ok(run(&store, &img, false)?.0)
        };
        let numeric = (perturb(1.0)? - perturb(-1.0)?) / (2.0 * eps);
        if !below_noise(analytic, numeric) {
            worst = maxr(worst, relative_error(analytic, numeric));
        }
    }

    // One direction per trainable parameter tensor.
    for (k, id) in trainable_ids(&store).into_iter().enumerate() {
        let n = store.get(id).numel();
        let d = unit_direction(n, 301, k as u64);
        let analytic = grads.param(id).map(|g| dot(g, &d)).unwrap_or(0.0);
        let perturb = |sign: Real| -> Result<Real> {
            let mut work = store.clone();
            for (w, di) in work.get_mut(id).data_mut().iter_mut().zip(&d) {
                *w += sign * eps * di;
            }
            Ok(run(&work, &sample.image, false)?.0)
        };
        let numeric = (perturb(1.0)? - perturb(-1.0)?) / (2.0 * eps);
        if !below_noise(analytic, numeric) {
            worst = maxr(worst, relative_error(analytic, numeric));
        }
    }

    Ok(CheckResult {
        name: "cascade-directional",
        max_rel_err: worst,
        tolerance: TOL_CASCADE,
    })
}

/// Run the full suite in a stable order.
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    Ok(alloc::vec![
        check_conv2d()?,
        check_conv2d_strided()?,
        check_depthwise()?,
        check_tconv("tconv-stride1", 1, 131)?,
        check_tconv("tconv-stride2", 2, 135)?,
        check_batch_norm("batch-norm-train", true, 310)?,
        check_batch_norm("batch-norm-infer", false, 320)?,
        check_relu()?,
        check_sigmoid()?,
        check_max_pool_valid()?,
        check_max_pool_same()?,
        check_global_max()?,
        check_spectral_pool()?,
        check_spectral_lowpass()?,
        check_upsample()?,
        check_elementwise()?,
        check_gating_channel()?,
        check_gating_pixel()?,
        check_dropout()?,
        check_loss("bce-mean", 410, 0)?,
        check_loss("bce-sum", 420, 1)?,
        check_loss("dice", 430, 2)?,
        check_loss("segmentation-loss", 440, 3)?,
        check_dsc_block()?,
        check_inception_block()?,
        check_residual_block()?,
        check_hybrid_pool("hybrid-pool-valid", PoolMode::Valid, 450)?,
        check_hybrid_pool("hybrid-pool-same", PoolMode::Same, 460)?,
        check_sda()?,
        check_ssa()?,
        check_ssd()?,
        check_cascade_coords()?,
        check_cascade()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_values_are_distinct_and_spaced() {
        let t = lattice_tensor(Shape::d3(6, 6, 2));
        let mut vals = t.data().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in vals.windows(2) {
            assert!(pair[1] - pair[0] >= 0.0099);
        }
    }

    #[test]
    fn directions_are_unit_length() {
        let d = unit_direction(64, 1, 2);
        let norm: Real = d.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
