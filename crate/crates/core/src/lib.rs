//! Hierarchical segmentation networks built around spectral pooling,
//! residual inception blocks and spectral spatial-depth attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense row-major tensors in `(width, height, depth)`
//!   channels-last layout, plus the [`tensor::Real`] working precision.
//! * [`fft`] — unitary centre-shifted 2-D discrete Fourier transforms and
//!   the [`fft::ComplexPlane`] spectrum type.
//! * [`spectral`] — spectral pooling (frequency-domain crop with Hermitian
//!   correction), spectral low-pass filtering, max pooling and the learned
//!   hybrid pool that mixes both branches.
//! * [`tape`] — a reverse-mode gradient tape over whole-tensor operations
//!   (convolutions, batch norm, activations, pools, losses) with a
//!   finite-difference [`tape::grad_check`] harness.
//! * [`blocks`] — depthwise separable convolutions, inception convolution
//!   units and residual inception blocks.
//! * [`attention`] — spectral depth attention, spectral spatial attention
//!   and the combined skip-connection refinement.
//! * [`network`] — full model assembly (single network or two-stage
//!   cascade), parameter census and checkpoint serialisation.
//! * [`loss`], [`metrics`], [`optim`], [`train`] — segmentation losses,
//!   confusion-matrix metrics, optimisers and the training loop.
//! * [`uncertainty`] — Monte-Carlo dropout mean masks and per-pixel
//!   entropy maps.
//! * [`synth`] — deterministic synthetic dataset generation for desk-scale
//!   experiments.
//!
//! Everything is deterministic under a fixed seed: initialisation, data
//! shuffling, dropout and Monte-Carlo sampling all draw from counter-derived
//! ChaCha streams, and reductions run in a fixed order.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std`
//! feature only toggles which float-math backend is used.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod blocks;
pub mod checks;
pub mod conv;
pub mod error;
pub mod fft;
pub mod norm;
pub mod loss;
pub mod math;
mod matmul;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{CoreError, Result};
pub use tensor::{Real, Shape, Tensor};
