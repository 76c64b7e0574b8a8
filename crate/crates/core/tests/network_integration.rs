//! End-to-end structural tests of the cascade: shape contracts across
//! geometries, coupling semantics under saturated gates, and bit-level
//! determinism of builds and forwards.

use chs_core::network::{
    save_checkpoint, ChsNet, Coupling, Mode, Model, ModelKind, NetworkConfig,
};
use chs_core::params::{ParamId, ParamStore};
use chs_core::rng;
use chs_core::tape::Tape;
use chs_core::{Real, Shape, Tensor};
use rand::Rng;

fn image(size: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::tag::CHECK, 80);
    Tensor::from_fn(Shape::d3(size, size, 1), |_| r.random::<Real>())
}

fn find_param(store: &ParamStore, name: &str) -> ParamId {
    store
        .iter()
        .find(|(_, e)| e.name == name)
        .map(|(id, _)| id)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
}

#[test]
fn cascade_keeps_shape_across_geometries() {
    for &(stages, base, size) in &[
        (2usize, 8usize, 8usize),
        (2, 8, 16),
        (3, 4, 16),
        (3, 8, 24),
        (4, 4, 16),
    ] {
        let cfg = NetworkConfig {
            stages,
            base_filters: base,
            input_w: size,
            input_h: size,
            ..NetworkConfig::default()
        };
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::stream(11, rng::tag::INIT, 0);
        let model = Model::build(&mut store, &mut r, &cfg, ModelKind::Chs).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(image(size, 3));
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = model.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
        for head in [out.lung.as_ref().unwrap(), &out.infection] {
            let t = tape.value(head.prob);
            assert_eq!(
                t.shape().dims(),
                &[size, size, 1],
                "stages {stages} size {size}"
            );
            for v in t.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_geometry_or_channels() {
    let cfg = NetworkConfig {
        stages: 3,
        base_filters: 4,
        input_w: 16,
        input_h: 16,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(12, rng::tag::INIT, 0);
    let model = Model::build(&mut store, &mut r, &cfg, ModelKind::Raiu).unwrap();
    let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);

    // Extent not divisible by the downsampling factor.
    let mut tape = Tape::new(&store);
    let bad = tape.leaf(Tensor::zeros(Shape::d3(15, 16, 1)));
    assert!(model.forward(&mut tape, bad, Mode::Infer, &mut dr).is_err());

    // Wrong channel count.
    let mut tape = Tape::new(&store);
    let bad = tape.leaf(Tensor::zeros(Shape::d3(16, 16, 2)));
    assert!(model.forward(&mut tape, bad, Mode::Infer, &mut dr).is_err());
}

/// With the stage-one head bias pinned far positive, the lung map
/// saturates to exactly 1.0, and the masked coupling hands stage two the
/// untouched input slice: the cascade's infection head must agree
/// bit-for-bit with running stage two alone.
#[test]
fn saturated_lung_gate_reduces_masked_cascade_to_stage_two() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        coupling: Coupling::MaskedSlice,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(13, rng::tag::INIT, 0);
    let net = ChsNet::build(&mut store, &mut r, &cfg).unwrap();
    let bias = find_param(&store, "net1.head.b");
    for v in store.get_mut(bias).data_mut() {
        *v = 1000.0;
    }

    let img = image(16, 5);
    let mut tape = Tape::new(&store);
    let x = tape.leaf(img.clone());
    let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
    let out = net.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();

    let lung = tape.value(out.lung.prob);
    assert!(lung.data().iter().all(|v| *v == 1.0), "lung map saturates");

    let direct = net.net2.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
    assert_eq!(
        tape.value(out.infection.prob).data(),
        tape.value(direct.prob).data(),
        "masked coupling with a unit mask is the identity"
    );
}

/// With the head bias pinned far negative the lung map is exactly zero;
/// the masked stage-two input is then all zeros, so the infection output
/// cannot depend on the image.
#[test]
fn zero_lung_gate_blinds_stage_two() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        coupling: Coupling::MaskedSlice,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(14, rng::tag::INIT, 0);
    let net = ChsNet::build(&mut store, &mut r, &cfg).unwrap();
    let bias = find_param(&store, "net1.head.b");
    for v in store.get_mut(bias).data_mut() {
        *v = -1000.0;
    }

    let mut outputs = Vec::new();
    for seed in [5u64, 6] {
        let mut tape = Tape::new(&store);
        let x = tape.leaf(image(16, seed));
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = net.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
        assert!(tape.value(out.lung.prob).data().iter().all(|v| *v == 0.0));
        outputs.push(tape.value(out.infection.prob).data().to_vec());
    }
    assert_eq!(outputs[0], outputs[1]);
}

/// The map coupling feeds stage two the lung probabilities themselves;
/// under a saturated gate every image yields the same all-ones stage-two
/// input, so infection outputs coincide across images.
#[test]
fn map_coupling_passes_only_the_gate() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        coupling: Coupling::LungMap,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(15, rng::tag::INIT, 0);
    let net = ChsNet::build(&mut store, &mut r, &cfg).unwrap();
    let bias = find_param(&store, "net1.head.b");
    for v in store.get_mut(bias).data_mut() {
        *v = 1000.0;
    }
    let mut outputs = Vec::new();
    for seed in [7u64, 8] {
        let mut tape = Tape::new(&store);
        let x = tape.leaf(image(16, seed));
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = net.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
        outputs.push(tape.value(out.infection.prob).data().to_vec());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn concat_coupling_widens_stage_two_input() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        coupling: Coupling::ConcatSlice,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(16, rng::tag::INIT, 0);
    let net = ChsNet::build(&mut store, &mut r, &cfg).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.leaf(image(16, 9));
    let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
    let out = net.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
    assert_eq!(tape.value(out.infection.prob).shape().dims(), &[16, 16, 1]);

    // Stage two alone must reject a single-channel feed.
    let direct = net.net2.forward(&mut tape, x, Mode::Infer, &mut dr);
    assert!(direct.is_err(), "stage two expects two channels");
}

#[test]
fn builds_and_forwards_are_deterministic() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        ..NetworkConfig::default()
    };
    let build = |seed: u64| -> (ParamStore, Vec<u8>) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::tag::INIT, 0);
        Model::build(&mut store, &mut r, &cfg, ModelKind::Chs).unwrap();
        let bytes = save_checkpoint(&cfg, ModelKind::Chs, &store);
        (store, bytes)
    };
    let (store_a, bytes_a) = build(21);
    let (_, bytes_b) = build(21);
    let (_, bytes_c) = build(22);
    assert_eq!(bytes_a, bytes_b, "same seed, same parameters");
    assert_ne!(bytes_a, bytes_c, "different seed, different parameters");

    let model = {
        let mut store = ParamStore::new();
        let mut r = rng::stream(21, rng::tag::INIT, 0);
        Model::build(&mut store, &mut r, &cfg, ModelKind::Chs).unwrap()
    };
    let run = || -> Vec<Real> {
        let mut tape = Tape::new(&store_a);
        let x = tape.leaf(image(16, 30));
        let mut dr = rng::stream(0, rng::tag::DROPOUT, 0);
        let out = model.forward(&mut tape, x, Mode::Infer, &mut dr).unwrap();
        tape.value(out.infection.prob).data().to_vec()
    };
    assert_eq!(run(), run(), "inference is bit-deterministic");
}

/// `Sample` mode with rate zero must match plain inference exactly: the
/// only difference between the modes is the dropout draw.
#[test]
fn zero_rate_sampling_equals_inference() {
    let cfg = NetworkConfig {
        stages: 2,
        base_filters: 8,
        input_w: 16,
        input_h: 16,
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng::stream(23, rng::tag::INIT, 0);
    let model = Model::build(&mut store, &mut r, &cfg, ModelKind::Chs).unwrap();
    let img = image(16, 31);
    let run = |mode: Mode| -> Vec<Real> {
        let mut tape = Tape::new(&store);
        let x = tape.leaf(img.clone());
        let mut dr = rng::stream(99, rng::tag::MC_SAMPLE, 0);
        let out = model.forward(&mut tape, x, mode, &mut dr).unwrap();
        tape.value(out.infection.prob).data().to_vec()
    };
    assert_eq!(run(Mode::Infer), run(Mode::Sample { dropout: 0.0 }));
}
