//! Spectral pooling, spectral low-pass filtering and max pooling.
//!
//! Spectral pooling truncates a feature map in the frequency domain:
//! transform, centre-crop the spectrum to the target extent, repair
//! conjugate symmetry, invert, rescale. Cropping an even-sized window
//! orphans the Nyquist row/column (its mirror falls outside the kept
//! window), which would leak an imaginary component into the inverse;
//! the repair step averages every coefficient with the conjugate of its
//! mirrored partner, after which the inverse is real to machine
//! precision. A final `sqrt(out_area / in_area)` rescale keeps constant
//! inputs exactly constant.
//!
//! Every stage is linear, so the backward pass is the composed adjoint of
//! the stages run in reverse: the adjoint of a centre crop is a centred
//! zero-pad, the adjoint of the unitary DFT is the unitary inverse, and the
//! symmetrisation is self-adjoint. The unit tests pin this down with
//! `<Ax, y> = <x, A^T y>` identities on random data.
//!
//! Max pooling records the winning input index per output element (ties:
//! first in row-major scan order) so its backward pass routes gradients
//! only to winners.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fft::{dft2, idft2, mirror_index, ComplexPlane};
use crate::math::sqrt;
use crate::tensor::{conv_extent, Real, Shape, Tensor};

/// Imaginary residue allowed after inverting a symmetrised spectrum.
pub const IMAG_RESIDUE_LIMIT: Real = 1e-8;

/// Average every coefficient with the conjugate of its mirrored partner,
/// in place. Projects the spectrum onto the subspace with a real inverse;
/// spectra of real images are fixed points.
pub fn symmetrize(spec: &mut ComplexPlane) {
    let (w, h, d) = spec.whd();
    for m in 0..w {
        let mm = mirror_index(m, w);
        for n in 0..h {
            let nn = mirror_index(n, h);
            let a = (m * h + n) * d;
            let b = (mm * h + nn) * d;
            if a > b {
                continue; // each pair handled once, from its lower index
            }
            for c in 0..d {
                let (re_a, im_a) = (spec.re[a + c], spec.im[a + c]);
                let (re_b, im_b) = (spec.re[b + c], spec.im[b + c]);
                let re = 0.5 * (re_a + re_b);
                let im = 0.5 * (im_a - im_b);
                spec.re[a + c] = re;
                spec.im[a + c] = im;
                spec.re[b + c] = re;
                spec.im[b + c] = -im;
            }
        }
    }
}

/// Centre-crop a shifted spectrum so the DC bin stays centred.
pub fn crop_centered(spec: &ComplexPlane, ow: usize, oh: usize) -> ComplexPlane {
    let (w, h, d) = spec.whd();
    debug_assert!(ow <= w && oh <= h);
    let (sx, sy) = (w / 2 - ow / 2, h / 2 - oh / 2);
    let mut out = ComplexPlane::zeros(ow, oh, d);
    for m in 0..ow {
        for n in 0..oh {
            let src = ((m + sx) * h + (n + sy)) * d;
            let dst = (m * oh + n) * d;
            out.re[dst..dst + d].copy_from_slice(&spec.re[src..src + d]);
            out.im[dst..dst + d].copy_from_slice(&spec.im[src..src + d]);
        }
    }
    out
}

/// Centred zero-pad: the adjoint of [`crop_centered`].
pub fn pad_centered(spec: &ComplexPlane, w: usize, h: usize) -> ComplexPlane {
    let (ow, oh, d) = spec.whd();
    debug_assert!(ow <= w && oh <= h);
    let (sx, sy) = (w / 2 - ow / 2, h / 2 - oh / 2);
    let mut out = ComplexPlane::zeros(w, h, d);
    for m in 0..ow {
        for n in 0..oh {
            let dst = ((m + sx) * h + (n + sy)) * d;
            let src = (m * oh + n) * d;
            out.re[dst..dst + d].copy_from_slice(&spec.re[src..src + d]);
            out.im[dst..dst + d].copy_from_slice(&spec.im[src..src + d]);
        }
    }
    out
}

fn rescale_real(spec: ComplexPlane, alpha: Real, context: &str) -> Result<Tensor> {
    let residue = spec.max_abs_im();
    if residue >= IMAG_RESIDUE_LIMIT {
        return Err(CoreError::contract(format!(
            "{context}: imaginary residue {residue:e} exceeds {IMAG_RESIDUE_LIMIT:e}"
        )));
    }
    let mut t = spec.into_real();
    for v in t.data_mut() {
        *v *= alpha;
    }
    Ok(t)
}

/// Frequency-domain downsampling of each channel to `(out_w, out_h)`.
pub fn spectral_pool_fwd(x: &Tensor, out_w: usize, out_h: usize) -> Result<Tensor> {
    let (w, h, _d) = x.shape().whd()?;
    if out_w == 0 || out_h == 0 || out_w > w || out_h > h {
        return Err(CoreError::shape(format!(
            "spectral_pool target ({out_w},{out_h}) must be within input ({w},{h}) and positive"
        )));
    }
    let spec = dft2(x)?;
    let mut cropped = crop_centered(&spec, out_w, out_h);
    symmetrize(&mut cropped);
    let inv = idft2(&cropped);
    let alpha = sqrt((out_w * out_h) as Real / (w * h) as Real);
    rescale_real(inv, alpha, "spectral_pool")
}

/// Adjoint of [`spectral_pool_fwd`]: routes an `(out_w, out_h, d)` gradient
/// back to the `(in_w, in_h, d)` input grid.
pub fn spectral_pool_bwd(grad_out: &Tensor, in_w: usize, in_h: usize) -> Result<Tensor> {
    let (ow, oh, _d) = grad_out.shape().whd()?;
    let mut spec = dft2(grad_out)?;
    symmetrize(&mut spec);
    let padded = pad_centered(&spec, in_w, in_h);
    let inv = idft2(&padded);
    let alpha = sqrt((ow * oh) as Real / (in_w * in_h) as Real);
    // The adjoint of "take the real part" embeds the gradient with zero
    // imaginary part, which dft2 of a real tensor already does; the final
    // real projection mirrors the forward realness (residue is fp noise).
    let mut t = inv.into_real();
    for v in t.data_mut() {
        *v *= alpha;
    }
    Ok(t)
}

/// Keep extent: zero every frequency outside the centred
/// `(ceil(w/2), ceil(h/2))` band, repair symmetry, invert. The same-mode
/// spectral branch of the hybrid pool.
pub fn spectral_lowpass_fwd(x: &Tensor) -> Result<Tensor> {
    let (w, h, _d) = x.shape().whd()?;
    let spec = dft2(x)?;
    let mut windowed = pad_centered(
        &crop_centered(&spec, w.div_ceil(2), h.div_ceil(2)),
        w,
        h,
    );
    symmetrize(&mut windowed);
    let inv = idft2(&windowed);
    rescale_real(inv, 1.0, "spectral_lowpass")
}

/// Adjoint of [`spectral_lowpass_fwd`]: the same pipeline with the
/// symmetrisation and windowing stages swapped.
pub fn spectral_lowpass_bwd(grad_out: &Tensor) -> Result<Tensor> {
    let (w, h, _d) = grad_out.shape().whd()?;
    let mut spec = dft2(grad_out)?;
    symmetrize(&mut spec);
    let windowed = pad_centered(&crop_centered(&spec, w.div_ceil(2), h.div_ceil(2)), w, h);
    let inv = idft2(&windowed);
    Ok(inv.into_real())
}

/// Max-pool geometry: `valid` halves extents with a 2x2 stride-2 window;
/// `same` keeps extents with a 3x3 stride-1 clipped window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Valid,
    Same,
}

pub struct MaxPoolOut {
    pub output: Tensor,
    /// Flat input index of the winning element per output element.
    pub winners: Vec<u32>,
}

/// Windowed max with winner recording. Ties pick the first element in
/// row-major scan order; `same` windows are clipped at the borders rather
/// than padded, so no sentinel value can win.
pub fn max_pool_fwd(x: &Tensor, window: usize, stride: usize, mode: PoolMode) -> Result<MaxPoolOut> {
    let (w, h, d) = x.shape().whd()?;
    if x.numel() > u32::MAX as usize {
        return Err(CoreError::shape("max_pool input too large for winner indices"));
    }
    let pad = match mode {
        PoolMode::Valid => 0,
        PoolMode::Same => window / 2,
    };
    let ow = conv_extent(w, pad, window, stride)?;
    let oh = conv_extent(h, pad, window, stride)?;
    let mut out = Tensor::zeros(Shape::d3(ow, oh, d));
    let mut winners = vec![0u32; ow * oh * d];
    let data = x.data();
    let od = out.data_mut();
    // Window clipping depends only on the pixel, so walk taps in scan order
    // once per pixel and compare whole channel rows; the first tap seeds
    // the running best, which keeps the first-wins tie rule.
    for ox in 0..ow {
        for oy in 0..oh {
            let obase = (ox * oh + oy) * d;
            let mut seeded = false;
            for wx in 0..window {
                let ix = ox * stride + wx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                for wy in 0..window {
                    let iy = oy * stride + wy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let xbase = (ix * h + iy) * d;
                    if !seeded {
                        od[obase..obase + d].copy_from_slice(&data[xbase..xbase + d]);
                        for (wi, c) in winners[obase..obase + d].iter_mut().zip(0..d) {
                            *wi = (xbase + c) as u32;
                        }
                        seeded = true;
                        continue;
                    }
                    for c in 0..d {
                        let v = data[xbase + c];
                        if v > od[obase + c] {
                            od[obase + c] = v;
                            winners[obase + c] = (xbase + c) as u32;
                        }
                    }
                }
            }
            if !seeded {
                for v in od[obase..obase + d].iter_mut() {
                    *v = Real::NEG_INFINITY;
                }
            }
        }
    }
    Ok(MaxPoolOut { output: out, winners })
}

/// Scatter the output gradient to each winner.
pub fn max_pool_bwd(winners: &[u32], grad_out: &[Real], in_shape: &Shape) -> Tensor {
    let mut grad_in = Tensor::zeros(in_shape.clone());
    let g = grad_in.data_mut();
    for (win, go) in winners.iter().zip(grad_out.iter()) {
        g[*win as usize] += *go;
    }
    grad_in
}

/// Global per-channel max over all pixels, with winners.
pub fn global_max_fwd(x: &Tensor) -> Result<MaxPoolOut> {
    let (w, h, d) = x.shape().whd()?;
    if x.numel() > u32::MAX as usize {
        return Err(CoreError::shape("global max input too large for winner indices"));
    }
    let mut out = Tensor::zeros(Shape::d3(1, 1, d));
    let mut winners = vec![0u32; d];
    let data = x.data();
    for c in 0..d {
        let mut best = Real::NEG_INFINITY;
        let mut best_idx = 0u32;
        for x_ in 0..w {
            for y_ in 0..h {
                let idx = (x_ * h + y_) * d + c;
                let v = data[idx];
                if v > best {
                    best = v;
                    best_idx = idx as u32;
                }
            }
        }
        out.data_mut()[c] = best;
        winners[c] = best_idx;
    }
    Ok(MaxPoolOut { output: out, winners })
}
