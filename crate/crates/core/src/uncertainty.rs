//! Monte-Carlo dropout uncertainty estimation.
//!
//! The model runs `T` stochastic forward passes with dropout active over
//! frozen batch-norm statistics; the per-pixel mean of the infection
//! head is the aggregate mask, and its Bernoulli entropy
//! `U = -(p ln p + (1-p) ln(1-p))` (with `0 ln 0 := 0`) is the
//! uncertainty map, bounded by `[0, ln 2]` and maximal exactly at
//! `p = 0.5`. Pass `t` draws from stream `(seed, MC_SAMPLE, t)`, so maps
//! are reproducible and independent of evaluation order.

use crate::error::{CoreError, Result};
use crate::math::bernoulli_entropy;
use crate::network::{Mode, Model};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Mean mask and entropy map of one Monte-Carlo pass.
pub struct UncertaintyMap {
    /// Per-pixel mean of the sampled infection masks, in `[0,1]`.
    pub mean: Tensor,
    /// Per-pixel Bernoulli entropy of the mean, in `[0, ln 2]`.
    pub entropy: Tensor,
}

/// Estimate segmentation uncertainty with `t_samples` dropout passes.
pub fn mc_dropout_uncertainty(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    t_samples: usize,
    dropout_rate: Real,
    seed: u64,
) -> Result<UncertaintyMap> {
    if t_samples < 2 {
        return Err(CoreError::contract(format!(
            "Monte-Carlo sampling needs at least 2 passes, got {t_samples}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(CoreError::config(format!(
            "dropout_rate {dropout_rate} must lie in [0,1)"
        )));
    }
    let mut acc: Option<Tensor> = None;
    for t in 0..t_samples {
        let mut r = rng::stream(seed, rng::tag::MC_SAMPLE, t as u64);
        let mut tape = Tape::new(store);
        let x = tape.leaf(image.clone());
        let out = model.forward(
            &mut tape,
            x,
            Mode::Sample {
                dropout: dropout_rate,
            },
            &mut r,
        )?;
        let prob = tape.value(out.infection.prob);
        match &mut acc {
            None => acc = Some(prob.clone()),
            Some(sum) => {
                for (s, p) in sum.data_mut().iter_mut().zip(prob.data()) {
                    *s += p;
                }
            }
        }
    }
    let mut mean = acc.expect("t_samples >= 2");
    let inv = 1.0 / t_samples as Real;
    for v in mean.data_mut() {
        *v *= inv;
    }
    let entropy = Tensor::new(
        mean.shape().clone(),
        mean.data().iter().map(|p| bernoulli_entropy(*p)).collect(),
    )?;
    Ok(UncertaintyMap { mean, entropy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Model, ModelKind, NetworkConfig};
    use crate::tensor::Shape;

    fn tiny_model() -> (NetworkConfig, ParamStore, Model) {
        let cfg = NetworkConfig {
            stages: 2,
            base_filters: 8,
            input_w: 16,
            input_h: 16,
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(21, rng::tag::INIT, 0);
        let model = Model::build(&mut store, &mut r, &cfg, ModelKind::Raiu).unwrap();
        (cfg, store, model)
    }

    fn test_image() -> Tensor {
        Tensor::from_fn(Shape::d3(16, 16, 1), |i| {
            let (x, y) = (i / 16, i % 16);
            if (4..12).contains(&x) && (4..12).contains(&y) {
                0.8
            } else {
                0.1
            }
        })
    }

    #[test]
    fn zero_dropout_collapses_to_the_deterministic_entropy() {
        let (_, store, model) = tiny_model();
        let image = test_image();
        let map = mc_dropout_uncertainty(&model, &store, &image, 4, 0.0, 5).unwrap();
        // All passes identical -> the mean is one Infer forward.
        let mut tape = Tape::new(&store);
        let x = tape.leaf(image.clone());
        let mut r = rng::stream(0, rng::tag::MC_SAMPLE, 0);
        let out = model.forward(&mut tape, x, Mode::Infer, &mut r).unwrap();
        let single = tape.value(out.infection.prob);
        for (m, s) in map.mean.data().iter().zip(single.data()) {
            assert!((m - s).abs() < 1e-12);
        }
        for (u, p) in map.entropy.data().iter().zip(map.mean.data()) {
            assert!((u - bernoulli_entropy(*p)).abs() < 1e-12);
        }
    }

    #[test]
    fn maps_are_bounded_and_seed_deterministic() {
        let (_, store, model) = tiny_model();
        let image = test_image();
        let a = mc_dropout_uncertainty(&model, &store, &image, 5, 0.3, 40).unwrap();
        let b = mc_dropout_uncertainty(&model, &store, &image, 5, 0.3, 40).unwrap();
        assert_eq!(a.mean.data(), b.mean.data());
        assert_eq!(a.entropy.data(), b.entropy.data());
        let ln2 = crate::math::ln(2.0);
        for (p, u) in a.mean.data().iter().zip(a.entropy.data()) {
            assert!((0.0..=1.0).contains(p));
            assert!(*u >= 0.0 && *u <= ln2 + 1e-12);
        }
        let c = mc_dropout_uncertainty(&model, &store, &image, 5, 0.3, 41).unwrap();
        assert_ne!(a.mean.data(), c.mean.data(), "different seed, same maps");
    }

    #[test]
    fn sample_count_contract_is_enforced() {
        let (_, store, model) = tiny_model();
        let image = test_image();
        assert!(mc_dropout_uncertainty(&model, &store, &image, 1, 0.5, 0).is_err());
        assert!(mc_dropout_uncertainty(&model, &store, &image, 2, 1.0, 0).is_err());
    }
}
