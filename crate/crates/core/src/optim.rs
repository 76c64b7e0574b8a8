//! Gradient-descent optimizers over a parameter store.
//!
//! Adam is the default (step size 1e-3, betas 0.9/0.999, epsilon 1e-8);
//! plain SGD is selectable. Only trainable parameters that actually
//! received a gradient are touched, so frozen tensors (such as batch
//! norm running statistics) and parameters outside the recorded graph
//! keep their values. Moment buffers are allocated lazily per parameter
//! and the bias-correction step count is global, matching the common
//! framework convention.

use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::Grads;
use crate::tensor::Real;

/// Source of per-parameter gradients consumed by [`Optimizer::step`]:
/// either one backward pass or a batch accumulator.
pub trait GradSource {
    fn param_grad(&self, id: ParamId) -> Option<&[Real]>;
}

impl GradSource for Grads {
    fn param_grad(&self, id: ParamId) -> Option<&[Real]> {
        self.param(id)
    }
}

/// Sums per-sample gradients, then divides once to form the batch mean.
pub struct GradAccum {
    sums: Vec<Option<Vec<Real>>>,
    count: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum {
            sums: alloc::vec![None; store.len()],
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &Grads) {
        self.count += 1;
        for (id, g) in grads.param_entries() {
            match &mut self.sums[id.index()] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Convert accumulated sums into the mean over added samples.
    pub fn finish_mean(&mut self) {
        if self.count > 1 {
            let inv = 1.0 / self.count as Real;
            for slot in self.sums.iter_mut().flatten() {
                for v in slot.iter_mut() {
                    *v *= inv;
                }
            }
        }
    }
}

impl GradSource for GradAccum {
    fn param_grad(&self, id: ParamId) -> Option<&[Real]> {
        self.sums[id.index()].as_deref()
    }
}

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(crate::error::CoreError::config(alloc::format!(
                "unknown optimizer '{other}' (expected adam|sgd)"
            ))),
        }
    }
}

struct Moments {
    m: Vec<Real>,
    v: Vec<Real>,
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step_count: u32,
    moments: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: Real) -> Self {
        Optimizer {
            kind,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn adam(learning_rate: Real) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: Real) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps_taken(&self) -> u32 {
        self.step_count
    }

    /// Apply one update from accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &impl GradSource) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.param_grad(id) else { continue };
            let lr = self.learning_rate;
            match self.kind {
                OptimizerKind::Sgd => {
                    let w = store.get_mut(id).data_mut();
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let idx = id.index();
                    if self.moments.len() <= idx {
                        self.moments.resize_with(idx + 1, || None);
                    }
                    let n = g.len();
                    let slot = self.moments[idx].get_or_insert_with(|| Moments {
                        m: alloc::vec![0.0; n],
                        v: alloc::vec![0.0; n],
                    });
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let c1 = 1.0 - crate::math::powi(b1, t);
                    let c2 = 1.0 - crate::math::powi(b2, t);
                    let w = store.get_mut(id).data_mut();
                    for i in 0..n {
                        let gi = g[i];
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = slot.m[i] / c1;
                        let v_hat = slot.v[i] / c2;
                        w[i] -= lr * m_hat / (crate::math::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::{Shape, Tensor};

    fn quadratic_grads(store: &ParamStore, id: crate::params::ParamId) -> Grads {
        // d/dw of (w - 3)^2 summed over the tensor.
        let mut tape = Tape::new(store);
        let w = tape.param(id);
        let three = tape.leaf(Tensor::full(store.get(id).shape().clone(), 3.0));
        let neg = tape.scale(three, -1.0);
        let diff = tape.add(w, neg).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(Shape::d1(2), alloc::vec![1.0, 5.0]).unwrap(), true)
            .unwrap();
        let grads = quadratic_grads(&store, id);
        let mut opt = Optimizer::sgd(0.25);
        opt.step(&mut store, &grads).unwrap();
        // grad = 2(w-3) = [-4, 4]; w' = w - 0.25 * grad.
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-12);
        assert!((store.get(id).data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_signed_rate() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(Shape::d1(2), alloc::vec![1.0, 5.0]).unwrap(), true)
            .unwrap();
        let grads = quadratic_grads(&store, id);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut store, &grads).unwrap();
        // After bias correction the first Adam step is -lr * sign(g).
        assert!((store.get(id).data()[0] - 1.1).abs() < 1e-6);
        assert!((store.get(id).data()[1] - 4.9).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(Shape::d1(2), alloc::vec![-7.0, 11.0]).unwrap(), true)
            .unwrap();
        let mut opt = Optimizer::adam(0.2);
        for _ in 0..400 {
            let grads = quadratic_grads(&store, id);
            opt.step(&mut store, &grads).unwrap();
        }
        for v in store.get(id).data() {
            assert!((v - 3.0).abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn accumulator_mean_of_identical_grads_is_identity() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(Shape::d1(3), alloc::vec![1.0, -2.0, 0.5]).unwrap(), true)
            .unwrap();
        let g = quadratic_grads(&store, id);
        let mut acc = GradAccum::new(&store);
        acc.add(&g);
        acc.add(&g);
        acc.add(&g);
        acc.finish_mean();
        assert_eq!(acc.count(), 3);
        assert_eq!(acc.param_grad(id).unwrap(), g.param(id).unwrap());
    }

    #[test]
    fn frozen_and_unreached_parameters_stay_put() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(Shape::d1(1), alloc::vec![1.0]).unwrap(), true)
            .unwrap();
        let frozen = store
            .add("run", Tensor::new(Shape::d1(1), alloc::vec![9.0]).unwrap(), false)
            .unwrap();
        let spare = store
            .add("spare", Tensor::new(Shape::d1(1), alloc::vec![4.0]).unwrap(), true)
            .unwrap();
        let grads = quadratic_grads(&store, id);
        let mut opt = Optimizer::adam(0.5);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(frozen).data()[0], 9.0);
        assert_eq!(store.get(spare).data()[0], 4.0);
        assert!(store.get(id).data()[0] != 1.0);
    }
}
