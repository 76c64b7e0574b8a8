//! Named parameter storage with stable registration order.
//!
//! Models register every tensor (weights, biases, batch-norm affine and
//! running statistics) here under a hierarchical dotted name. The
//! registration order is the canonical order for checkpoints, the
//! parameter census and optimiser state, which keeps all of them
//! deterministic.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::math::sqrt;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to one registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Trainable tensors receive gradients and optimiser updates; the
    /// batch-norm running statistics are registered non-trainable.
    pub trainable: bool,
}

/// All parameters of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CoreError::config(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index()].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.index()].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    /// Look a parameter up by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    /// Total element count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// He-normal initialisation: zero-mean normal with `sqrt(2 / fan_in)`
/// standard deviation, the standard choice ahead of ReLU activations.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor {
    let std = sqrt(2.0 / fan_in.max(1) as Real);
    Tensor::from_fn(shape, |_| {
        let z: Real = StandardNormal.sample(rng);
        z * std
    })
}

/// Uniform `[-lim, lim)` values; used only by tests and diagnostics.
pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lim: Real) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.random::<Real>() * 2.0 - 1.0) * lim)
}
