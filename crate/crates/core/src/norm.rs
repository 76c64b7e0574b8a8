//! Batch normalisation over the spatial axes of a `(w,h,d)` map.
//!
//! Each channel is normalised by the mean and biased variance of its own
//! `w*h` pixels (graphs here are built per sample, so the "batch" is the
//! spatial extent), then scaled and shifted by the learned `gamma`/`beta`.
//! Training mode also reports the batch statistics so the caller can fold
//! them into the running estimates with momentum; inference mode
//! normalises with the running estimates instead.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math::sqrt;
use crate::tensor::{Real, Tensor};

/// Variance guard added inside every square root.
pub const BN_EPS: Real = 1e-5;
/// Weight of the previous running estimate in the momentum update.
pub const BN_MOMENTUM: Real = 0.9;

/// Saved state from a training-mode forward, needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Training-mode forward: normalise by batch statistics.
pub fn batch_norm_train_fwd(
    x: &Tensor,
    gamma: &[Real],
    beta: &[Real],
) -> Result<(Tensor, BnSaved)> {
    let (w, h, d) = x.shape().whd()?;
    let m = (w * h) as Real;
    let data = x.data();
    let mut mean = vec![0.0 as Real; d];
    let mut var = vec![0.0 as Real; d];
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        for (acc, v) in mean.iter_mut().zip(row.iter()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        for ((acc, v), mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let t = v - mu;
            *acc += t * t;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let mut out = Tensor::zeros(x.shape().clone());
    let od = out.data_mut();
    let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        let orow = &mut od[px * d..(px + 1) * d];
        for c in 0..d {
            orow[c] = gamma[c] * (row[c] - mean[c]) * inv_std[c] + beta[c];
        }
    }
    Ok((out, BnSaved { mean, var }))
}

/// Inference-mode forward: normalise by running statistics.
pub fn batch_norm_infer_fwd(
    x: &Tensor,
    gamma: &[Real],
    beta: &[Real],
    run_mean: &[Real],
    run_var: &[Real],
) -> Result<Tensor> {
    let (w, h, d) = x.shape().whd()?;
    let data = x.data();
    let mut out = Tensor::zeros(x.shape().clone());
    let od = out.data_mut();
    let inv_std: Vec<Real> = run_var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        let orow = &mut od[px * d..(px + 1) * d];
        for c in 0..d {
            orow[c] = gamma[c] * (row[c] - run_mean[c]) * inv_std[c] + beta[c];
        }
    }
    Ok(out)
}

/// Training-mode backward. Returns `(grad_x, grad_gamma, grad_beta)`;
/// `grad_x` accounts for the dependence of the batch statistics on every
/// pixel of the channel.
pub fn batch_norm_train_bwd(
    x: &Tensor,
    gamma: &[Real],
    saved: &BnSaved,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<Real>, Vec<Real>)> {
    let (w, h, d) = x.shape().whd()?;
    let m = (w * h) as Real;
    let data = x.data();
    let go = grad_out.data();
    let inv_std: Vec<Real> = saved.var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();

    let mut grad_gamma = vec![0.0 as Real; d];
    let mut grad_beta = vec![0.0 as Real; d];
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        let grow = &go[px * d..(px + 1) * d];
        for c in 0..d {
            let xhat = (row[c] - saved.mean[c]) * inv_std[c];
            grad_gamma[c] += grow[c] * xhat;
            grad_beta[c] += grow[c];
        }
    }

    let grad_x = if need_input_grad {
        // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
        let mean_dy: Vec<Real> = grad_beta.iter().map(|v| v / m).collect();
        let mean_dy_xhat: Vec<Real> = grad_gamma.iter().map(|v| v / m).collect();
        let mut gx = Tensor::zeros(x.shape().clone());
        let gxd = gx.data_mut();
        for px in 0..w * h {
            let row = &data[px * d..(px + 1) * d];
            let grow = &go[px * d..(px + 1) * d];
            let gxrow = &mut gxd[px * d..(px + 1) * d];
            for c in 0..d {
                let xhat = (row[c] - saved.mean[c]) * inv_std[c];
                gxrow[c] =
                    gamma[c] * inv_std[c] * (grow[c] - mean_dy[c] - xhat * mean_dy_xhat[c]);
            }
        }
        Some(gx)
    } else {
        None
    };
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Inference-mode backward: running statistics are constants, so the map
/// is affine per channel.
pub fn batch_norm_infer_bwd(
    x: &Tensor,
    gamma: &[Real],
    run_mean: &[Real],
    run_var: &[Real],
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<Real>, Vec<Real>)> {
    let (w, h, d) = x.shape().whd()?;
    let data = x.data();
    let go = grad_out.data();
    let inv_std: Vec<Real> = run_var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();
    let mut grad_gamma = vec![0.0 as Real; d];
    let mut grad_beta = vec![0.0 as Real; d];
    for px in 0..w * h {
        let row = &data[px * d..(px + 1) * d];
        let grow = &go[px * d..(px + 1) * d];
        for c in 0..d {
            let xhat = (row[c] - run_mean[c]) * inv_std[c];
            grad_gamma[c] += grow[c] * xhat;
            grad_beta[c] += grow[c];
        }
    }
    let grad_x = if need_input_grad {
        let mut gx = Tensor::zeros(x.shape().clone());
        let gxd = gx.data_mut();
        for px in 0..w * h {
            let grow = &go[px * d..(px + 1) * d];
            let gxrow = &mut gxd[px * d..(px + 1) * d];
            for c in 0..d {
                gxrow[c] = grow[c] * gamma[c] * inv_std[c];
            }
        }
        Some(gx)
    } else {
        None
    };
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Fold one batch statistic into a running estimate:
/// `run = momentum * run + (1 - momentum) * batch`.
pub fn update_running(run: &mut [Real], batch: &[Real]) {
    for (r, b) in run.iter_mut().zip(batch.iter()) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Shape;
    use rand::Rng;

    #[test]
    fn train_mode_standardises_each_channel() {
        let mut r = rng::stream(1, rng::tag::CHECK, 2);
        let x = Tensor::from_fn(Shape::d3(6, 6, 3), |_| r.random::<Real>() * 5.0 - 1.0);
        let gamma = vec![1.0; 3];
        let beta = vec![0.0; 3];
        let (y, _) = batch_norm_train_fwd(&x, &gamma, &beta).unwrap();
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for px in 0..36 {
                mean += y.data()[px * 3 + c];
            }
            mean /= 36.0;
            for px in 0..36 {
                let t = y.data()[px * 3 + c] - mean;
                var += t * t;
            }
            var /= 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // off by var/(var+eps)
        }
    }

    #[test]
    fn affine_parameters_scale_and_shift() {
        let mut r = rng::stream(2, rng::tag::CHECK, 2);
        let x = Tensor::from_fn(Shape::d3(4, 4, 2), |_| r.random::<Real>());
        let (y0, _) = batch_norm_train_fwd(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let (y1, _) = batch_norm_train_fwd(&x, &[2.0, -1.0], &[0.5, 3.0]).unwrap();
        for px in 0..16 {
            assert!((y1.data()[px * 2] - (2.0 * y0.data()[px * 2] + 0.5)).abs() < 1e-12);
            assert!((y1.data()[px * 2 + 1] - (-y0.data()[px * 2 + 1] + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_mode_uses_running_statistics() {
        let x = Tensor::full(Shape::d3(2, 2, 1), 4.0);
        let y = batch_norm_infer_fwd(&x, &[1.0], &[0.0], &[2.0], &[4.0 - BN_EPS]).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-9); // (4-2)/sqrt(4) = 1
        }
    }

    #[test]
    fn running_update_applies_momentum() {
        let mut run = vec![1.0, 0.0];
        update_running(&mut run, &[0.0, 10.0]);
        assert!((run[0] - 0.9).abs() < 1e-12);
        assert!((run[1] - 1.0).abs() < 1e-12);
    }
}
