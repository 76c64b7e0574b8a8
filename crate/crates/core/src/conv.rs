//! Convolution kernels: standard, depthwise and transposed.
//!
//! All three operate on channels-last `(w,h,d)` tensors. Weight layouts put
//! the axis walked by the innermost loop last, so the hot loops run over
//! contiguous slices and auto-vectorise:
//!
//! * standard conv weights: `(f, f, d, r)` — inner loop broadcasts one
//!   input value into `r` accumulators;
//! * depthwise weights: `(f, f, d)` — inner loop is an elementwise
//!   multiply-add over channels;
//! * transposed conv weights: `(f, f, out_d, in_d)` — inner loop is a dot
//!   product over input channels.
//!
//! The transposed convolution is the adjoint of a stride-`s` valid
//! correlation with the channel axes of the kernel swapped, cropped to
//! exactly `s` times the input extent (so stride 1 reproduces a
//! same-padded correlation and stride 2 tiles without overlap). The
//! backward functions were written from the adjoint relationships and are
//! pinned by dot-product identities and finite differences in the tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matmul::{mm_nn, mm_tn};
use crate::tensor::{conv_extent, shape_list, Real, Shape, Tensor};

/// Valid output rectangle for one `(fx, fy)` tap of a stride-1 correlation:
/// output pixel `(ox, oy)` reads input pixel `(ox + dx, oy + dy)`.
struct Tap {
    dx: isize,
    dy: isize,
    ox0: usize,
    ox1: usize,
    oy0: usize,
    oy1: usize,
}

impl Tap {
    fn new(fx: usize, fy: usize, pad: usize, w: usize, h: usize, ow: usize, oh: usize) -> Option<Tap> {
        let dx = fx as isize - pad as isize;
        let dy = fy as isize - pad as isize;
        let ox0 = if dx < 0 { (-dx) as usize } else { 0 };
        let oy0 = if dy < 0 { (-dy) as usize } else { 0 };
        let ox1 = (ow as isize).min(w as isize - dx).max(0) as usize;
        let oy1 = (oh as isize).min(h as isize - dy).max(0) as usize;
        if ox0 >= ox1 || oy0 >= oy1 {
            return None;
        }
        Some(Tap { dx, dy, ox0, ox1, oy0, oy1 })
    }

    /// Rows covered by each strip.
    fn strip_len(&self) -> usize {
        self.oy1 - self.oy0
    }

    /// Element offsets into the input (`row_d` channels per pixel) and
    /// output (`row_r` per pixel) buffers for the strip at output row `ox`.
    fn strip_offsets(&self, ox: usize, h: usize, oh: usize, row_d: usize, row_r: usize) -> (usize, usize) {
        let ix = (ox as isize + self.dx) as usize;
        let iy0 = (self.oy0 as isize + self.dy) as usize;
        ((ix * h + iy0) * row_d, (ox * oh + self.oy0) * row_r)
    }
}

/// Standard correlation: `(w,h,d) * (f,f,d,r) -> (ow,oh,r)`.
pub fn conv2d_fwd(
    x: &Tensor,
    weights: &[Real],
    bias: Option<&[Real]>,
    f: usize,
    r: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (w, h, d) = x.shape().whd()?;
    if weights.len() != f * f * d * r {
        return Err(CoreError::shape(format!(
            "conv2d kernel length {} does not match {}",
            weights.len(),
            shape_list(&[f, f, d, r])
        )));
    }
    if let Some(b) = bias {
        if b.len() != r {
            return Err(CoreError::shape(format!(
                "conv2d bias length {} does not match filter count {r}",
                b.len()
            )));
        }
    }
    let ow = conv_extent(w, pad, f, stride)?;
    let oh = conv_extent(h, pad, f, stride)?;
    // The stride-1 path accumulates on top of the bias, so seed the output
    // with the bias pattern directly instead of zero-filling and copying.
    let mut out = match bias {
        Some(b) if stride == 1 => Tensor::new_unchecked(Shape::d3(ow, oh, r), b.repeat(ow * oh)),
        _ => Tensor::zeros(Shape::d3(ow, oh, r)),
    };
    let data = x.data();
    let od = out.data_mut();
    if stride == 1 {
        // Each tap contributes a shifted pixel-block times its (d, r) slice
        // of the kernel; every contiguous run of output pixels becomes one
        // accumulating matrix product.
        for fx in 0..f {
            for fy in 0..f {
                let Some(tap) = Tap::new(fx, fy, pad, w, h, ow, oh) else {
                    continue;
                };
                let m = tap.strip_len();
                let wtap = &weights[(fx * f + fy) * d * r..(fx * f + fy + 1) * d * r];
                for ox in tap.ox0..tap.ox1 {
                    let (xo, oo) = tap.strip_offsets(ox, h, oh, d, r);
                    mm_nn(&data[xo..xo + m * d], wtap, &mut od[oo..oo + m * r], m, d, r);
                }
            }
        }
        return Ok(out);
    }
    let mut acc = vec![0.0 as Real; r];
    for ox in 0..ow {
        for oy in 0..oh {
            match bias {
                Some(b) => acc.copy_from_slice(b),
                None => acc.iter_mut().for_each(|v| *v = 0.0),
            }
            for fx in 0..f {
                let ix = ox * stride + fx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                for fy in 0..f {
                    let iy = oy * stride + fy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let xrow = &data[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                    let wrow = &weights[(fx * f + fy) * d * r..(fx * f + fy + 1) * d * r];
                    for (c, xv) in xrow.iter().enumerate() {
                        let wk = &wrow[c * r..(c + 1) * r];
                        for (a, wv) in acc.iter_mut().zip(wk.iter()) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            od[(ox * oh + oy) * r..(ox * oh + oy + 1) * r].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_fwd`] with respect to input, weights and bias.
/// `grad_x` is skipped (returned as `None`) unless requested.
pub fn conv2d_bwd(
    x: &Tensor,
    weights: &[Real],
    grad_out: &Tensor,
    f: usize,
    r: usize,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<Real>, Vec<Real>)> {
    let (w, h, d) = x.shape().whd()?;
    let (ow, oh, go_d) = grad_out.shape().whd()?;
    debug_assert_eq!(go_d, r);
    let data = x.data();
    let go = grad_out.data();

    let mut grad_w = vec![0.0 as Real; f * f * d * r];
    let mut grad_b = vec![0.0 as Real; r];
    for grow in go.chunks_exact(r) {
        for (gb, g) in grad_b.iter_mut().zip(grow.iter()) {
            *gb += g;
        }
    }

    if stride == 1 {
        // Mirror of the forward strip decomposition: per tap, the weight
        // gradient is (input strip)^T * (output-gradient strip) and the
        // input gradient routes the output strip back through the
        // transposed tap weights.
        let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape().clone()));
        let mut wt = vec![0.0 as Real; r * d];
        for fx in 0..f {
            for fy in 0..f {
                let Some(tap) = Tap::new(fx, fy, pad, w, h, ow, oh) else {
                    continue;
                };
                let m = tap.strip_len();
                let base = (fx * f + fy) * d * r;
                let gwtap = &mut grad_w[base..base + d * r];
                for ox in tap.ox0..tap.ox1 {
                    let (xo, oo) = tap.strip_offsets(ox, h, oh, d, r);
                    mm_tn(&data[xo..xo + m * d], &go[oo..oo + m * r], gwtap, m, d, r);
                }
                if let Some(gx) = gx.as_mut() {
                    let wtap = &weights[base..base + d * r];
                    for c in 0..d {
                        for k in 0..r {
                            wt[k * d + c] = wtap[c * r + k];
                        }
                    }
                    let gxd = gx.data_mut();
                    for ox in tap.ox0..tap.ox1 {
                        let (xo, oo) = tap.strip_offsets(ox, h, oh, d, r);
                        mm_nn(&go[oo..oo + m * r], &wt, &mut gxd[xo..xo + m * d], m, r, d);
                    }
                }
            }
        }
        return Ok((gx, grad_w, grad_b));
    }

    for ox in 0..ow {
        for oy in 0..oh {
            let grow = &go[(ox * oh + oy) * r..(ox * oh + oy + 1) * r];
            for fx in 0..f {
                let ix = ox * stride + fx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                for fy in 0..f {
                    let iy = oy * stride + fy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let xrow = &data[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                    let gwrow = &mut grad_w[(fx * f + fy) * d * r..(fx * f + fy + 1) * d * r];
                    for (c, xv) in xrow.iter().enumerate() {
                        let gwk = &mut gwrow[c * r..(c + 1) * r];
                        for (gw, g) in gwk.iter_mut().zip(grow.iter()) {
                            *gw += xv * g;
                        }
                    }
                }
            }
        }
    }

    let grad_x = if need_input_grad {
        let mut gx = Tensor::zeros(x.shape().clone());
        let gxd = gx.data_mut();
        for ix in 0..w {
            for iy in 0..h {
                let gxrow = &mut gxd[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                for fx in 0..f {
                    let oxs = ix + pad;
                    if oxs < fx || (oxs - fx) % stride != 0 {
                        continue;
                    }
                    let ox = (oxs - fx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    for fy in 0..f {
                        let oys = iy + pad;
                        if oys < fy || (oys - fy) % stride != 0 {
                            continue;
                        }
                        let oy = (oys - fy) / stride;
                        if oy >= oh {
                            continue;
                        }
                        let grow = &go[(ox * oh + oy) * r..(ox * oh + oy + 1) * r];
                        let wrow = &weights[(fx * f + fy) * d * r..(fx * f + fy + 1) * d * r];
                        for (c, gxv) in gxrow.iter_mut().enumerate() {
                            let wk = &wrow[c * r..(c + 1) * r];
                            let mut s = 0.0;
                            for (wv, g) in wk.iter().zip(grow.iter()) {
                                s += wv * g;
                            }
                            *gxv += s;
                        }
                    }
                }
            }
        }
        Some(gx)
    } else {
        None
    };
    Ok((grad_x, grad_w, grad_b))
}

/// Depthwise correlation: one `f x f` filter per channel, no bias.
pub fn depthwise_fwd(
    x: &Tensor,
    weights: &[Real],
    f: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (w, h, d) = x.shape().whd()?;
    if weights.len() != f * f * d {
        return Err(CoreError::shape(format!(
            "depthwise kernel length {} does not match {}",
            weights.len(),
            shape_list(&[f, f, d])
        )));
    }
    let ow = conv_extent(w, pad, f, stride)?;
    let oh = conv_extent(h, pad, f, stride)?;
    let mut out = Tensor::zeros(Shape::d3(ow, oh, d));
    let data = x.data();
    let od = out.data_mut();
    // The window clipping depends only on the pixel, so resolve the valid
    // taps once per pixel and then sum them per channel chunk, keeping the
    // running sums in registers instead of re-reading the output row.
    let mut taps: Vec<(usize, usize)> = Vec::with_capacity(f * f);
    for ox in 0..ow {
        for oy in 0..oh {
            taps.clear();
            for fx in 0..f {
                let ix = ox * stride + fx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                for fy in 0..f {
                    let iy = oy * stride + fy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    taps.push(((ix * h + iy) * d, (fx * f + fy) * d));
                }
            }
            let orow = &mut od[(ox * oh + oy) * d..(ox * oh + oy + 1) * d];
            accumulate_taps(data, weights, &taps, orow);
        }
    }
    Ok(out)
}

/// `out[c] += sum over taps of a[a_off + c] * b[b_off + c]`, vectorised in
/// channel chunks. Shared by the depthwise forward pass (`a` = input, `b` =
/// weights) and its input gradient (`a` = output gradient, `b` = weights).
fn accumulate_taps(a: &[Real], b: &[Real], taps: &[(usize, usize)], out: &mut [Real]) {
    const CH: usize = 8;
    let d = out.len();
    let mut c0 = 0;
    while c0 + CH <= d {
        let mut s = [0.0 as Real; CH];
        for &(ao, bo) in taps {
            let av: &[Real; CH] = a[ao + c0..ao + c0 + CH].try_into().unwrap();
            let bv: &[Real; CH] = b[bo + c0..bo + c0 + CH].try_into().unwrap();
            for t in 0..CH {
                s[t] += av[t] * bv[t];
            }
        }
        for (o, sv) in out[c0..c0 + CH].iter_mut().zip(s.iter()) {
            *o += sv;
        }
        c0 += CH;
    }
    while c0 < d {
        let mut s = 0.0;
        for &(ao, bo) in taps {
            s += a[ao + c0] * b[bo + c0];
        }
        out[c0] += s;
        c0 += 1;
    }
}

/// Gradients of [`depthwise_fwd`].
pub fn depthwise_bwd(
    x: &Tensor,
    weights: &[Real],
    grad_out: &Tensor,
    f: usize,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<Real>)> {
    let (w, h, d) = x.shape().whd()?;
    let (ow, oh, _) = grad_out.shape().whd()?;
    let data = x.data();
    let go = grad_out.data();
    let mut grad_w = vec![0.0 as Real; f * f * d];
    for ox in 0..ow {
        for oy in 0..oh {
            let grow = &go[(ox * oh + oy) * d..(ox * oh + oy + 1) * d];
            for fx in 0..f {
                let ix = ox * stride + fx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                for fy in 0..f {
                    let iy = oy * stride + fy;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let xrow = &data[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                    let gwrow = &mut grad_w[(fx * f + fy) * d..(fx * f + fy + 1) * d];
                    for ((gw, xv), g) in gwrow.iter_mut().zip(xrow.iter()).zip(grow.iter()) {
                        *gw += xv * g;
                    }
                }
            }
        }
    }
    let grad_x = if need_input_grad {
        let mut gx = Tensor::zeros(x.shape().clone());
        let gxd = gx.data_mut();
        let mut taps: Vec<(usize, usize)> = Vec::with_capacity(f * f);
        for ix in 0..w {
            for iy in 0..h {
                taps.clear();
                for fx in 0..f {
                    let oxs = ix + pad;
                    if oxs < fx || (oxs - fx) % stride != 0 {
                        continue;
                    }
                    let ox = (oxs - fx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    for fy in 0..f {
                        let oys = iy + pad;
                        if oys < fy || (oys - fy) % stride != 0 {
                            continue;
                        }
                        let oy = (oys - fy) / stride;
                        if oy >= oh {
                            continue;
                        }
                        taps.push(((ox * oh + oy) * d, (fx * f + fy) * d));
                    }
                }
                let gxrow = &mut gxd[(ix * h + iy) * d..(ix * h + iy + 1) * d];
                accumulate_taps(go, weights, &taps, gxrow);
            }
        }
        Some(gx)
    } else {
        None
    };
    Ok((grad_x, grad_w))
}

/// Transposed convolution: `(m,n,in_d) -> (s*m, s*n, out_d)` with weights
/// `(f, f, out_d, in_d)` and a per-output-channel bias.
///
/// Defined as the adjoint of the stride-`s` valid correlation using the
/// channel-swapped kernel, cropped to `s` times the input extent.
pub fn tconv_fwd(
    x: &Tensor,
    weights: &[Real],
    bias: &[Real],
    f: usize,
    out_d: usize,
    stride: usize,
) -> Result<Tensor> {
    let (m, n, in_d) = x.shape().whd()?;
    if weights.len() != f * f * out_d * in_d {
        return Err(CoreError::shape(format!(
            "transposed conv kernel length {} does not match {}",
            weights.len(),
            shape_list(&[f, f, out_d, in_d])
        )));
    }
    if bias.len() != out_d {
        return Err(CoreError::shape(format!(
            "transposed conv bias length {} does not match output depth {out_d}",
            bias.len()
        )));
    }
    if stride == 0 || stride > f {
        return Err(CoreError::config(format!(
            "transposed conv stride {stride} must be in 1..={f} (filter extent)"
        )));
    }
    let (ow, oh) = (stride * m, stride * n);
    let mut out = Tensor::zeros(Shape::d3(ow, oh, out_d));
    let data = x.data();
    let od = out.data_mut();
    for ox in 0..ow {
        for oy in 0..oh {
            let orow = &mut od[(ox * oh + oy) * out_d..(ox * oh + oy + 1) * out_d];
            orow.copy_from_slice(bias);
            for fx in 0..f {
                if ox < fx || (ox - fx) % stride != 0 {
                    continue;
                }
                let ix = (ox - fx) / stride;
                if ix >= m {
                    continue;
                }
                for fy in 0..f {
                    if oy < fy || (oy - fy) % stride != 0 {
                        continue;
                    }
                    let iy = (oy - fy) / stride;
                    if iy >= n {
                        continue;
                    }
                    let xrow = &data[(ix * n + iy) * in_d..(ix * n + iy + 1) * in_d];
                    let wrow =
                        &weights[(fx * f + fy) * out_d * in_d..(fx * f + fy + 1) * out_d * in_d];
                    for (c, o) in orow.iter_mut().enumerate() {
                        let wk = &wrow[c * in_d..(c + 1) * in_d];
                        let mut s = 0.0;
                        for (wv, xv) in wk.iter().zip(xrow.iter()) {
                            s += wv * xv;
                        }
                        *o += s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`tconv_fwd`].
pub fn tconv_bwd(
    x: &Tensor,
    weights: &[Real],
    grad_out: &Tensor,
    f: usize,
    out_d: usize,
    stride: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<Real>, Vec<Real>)> {
    let (m, n, in_d) = x.shape().whd()?;
    let (ow, oh, _) = grad_out.shape().whd()?;
    let data = x.data();
    let go = grad_out.data();
    let mut grad_w = vec![0.0 as Real; f * f * out_d * in_d];
    let mut grad_b = vec![0.0 as Real; out_d];
    for ox in 0..ow {
        for oy in 0..oh {
            let grow = &go[(ox * oh + oy) * out_d..(ox * oh + oy + 1) * out_d];
            for (gb, g) in grad_b.iter_mut().zip(grow.iter()) {
                *gb += g;
            }
            for fx in 0..f {
                if ox < fx || (ox - fx) % stride != 0 {
                    continue;
                }
                let ix = (ox - fx) / stride;
                if ix >= m {
                    continue;
                }
                for fy in 0..f {
                    if oy < fy || (oy - fy) % stride != 0 {
                        continue;
                    }
                    let iy = (oy - fy) / stride;
                    if iy >= n {
                        continue;
                    }
                    let xrow = &data[(ix * n + iy) * in_d..(ix * n + iy + 1) * in_d];
                    let gwrow =
                        &mut grad_w[(fx * f + fy) * out_d * in_d..(fx * f + fy + 1) * out_d * in_d];
                    for (c, g) in grow.iter().enumerate() {
                        let gwk = &mut gwrow[c * in_d..(c + 1) * in_d];
                        for (gw, xv) in gwk.iter_mut().zip(xrow.iter()) {
                            *gw += g * xv;
                        }
                    }
                }
            }
        }
    }
    let grad_x = if need_input_grad {
        let mut gx = Tensor::zeros(x.shape().clone());
        let gxd = gx.data_mut();
        for ix in 0..m {
            for iy in 0..n {
                let gxrow = &mut gxd[(ix * n + iy) * in_d..(ix * n + iy + 1) * in_d];
                for fx in 0..f {
                    let ox = ix * stride + fx;
                    if ox >= ow {
                        continue;
                    }
                    for fy in 0..f {
                        let oy = iy * stride + fy;
                        if oy >= oh {
                            continue;
                        }
                        let grow = &go[(ox * oh + oy) * out_d..(ox * oh + oy + 1) * out_d];
                        let wrow = &weights
                            [(fx * f + fy) * out_d * in_d..(fx * f + fy + 1) * out_d * in_d];
                        for (c, g) in grow.iter().enumerate() {
                            let wk = &wrow[c * in_d..(c + 1) * in_d];
                            for (gxv, wv) in gxrow.iter_mut().zip(wk.iter()) {
                                *gxv += g * wv;
                            }
                        }
                    }
                }
            }
        }
        Some(gx)
    } else {
        None
    };
    Ok((grad_x, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn randn(n: usize, seed: u64) -> Vec<Real> {
        let mut r = rng::stream(seed, rng::tag::CHECK, 1);
        (0..n).map(|_| r.random::<Real>() * 2.0 - 1.0).collect()
    }

    fn rand_tensor(w: usize, h: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(Shape::d3(w, h, d), randn(w * h * d, seed)).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // 1x1 kernel with identity channel mixing.
        let x = rand_tensor(4, 4, 3, 1);
        let mut wt = vec![0.0; 3 * 3];
        for c in 0..3 {
            wt[c * 3 + c] = 1.0;
        }
        let y = conv2d_fwd(&x, &wt, None, 1, 3, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        // 3x3 all-ones/9 kernel, same padding, constant input: interior
        // stays constant, borders shrink by the clipped taps.
        let x = Tensor::full(Shape::d3(5, 5, 1), 2.0);
        let wt = vec![1.0 / 9.0; 9];
        let y = conv2d_fwd(&x, &wt, None, 3, 1, 1, 1).unwrap();
        assert!((y.at3(2, 2, 0) - 2.0).abs() < 1e-12);
        assert!((y.at3(0, 0, 0) - 2.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn stride_two_shapes_follow_closed_form() {
        let x = rand_tensor(8, 6, 2, 2);
        let wt = randn(3 * 3 * 2 * 4, 3);
        let y = conv2d_fwd(&x, &wt, None, 3, 4, 2, 1).unwrap();
        assert_eq!(y.shape().dims(), &[4, 3, 4]);
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let (w, h, d, f, r, s, p) = (5, 6, 3, 3, 2, 2, 1);
        let x = rand_tensor(w, h, d, 4);
        let wt = randn(f * f * d * r, 5);
        let b = randn(r, 6);
        let y = conv2d_fwd(&x, &wt, Some(&b), f, r, s, p).unwrap();
        let (ow, oh, _) = y.shape().whd().unwrap();
        for ox in 0..ow {
            for oy in 0..oh {
                for k in 0..r {
                    let mut acc = b[k];
                    for fx in 0..f {
                        for fy in 0..f {
                            let (ix, iy) = (ox * s + fx, oy * s + fy);
                            if ix < p || iy < p || ix - p >= w || iy - p >= h {
                                continue;
                            }
                            for c in 0..d {
                                acc += x.at3(ix - p, iy - p, c) * wt[((fx * f + fy) * d + c) * r + k];
                            }
                        }
                    }
                    assert!((y.at3(ox, oy, k) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_keeps_channels_separate() {
        let x = rand_tensor(4, 4, 2, 7);
        // Kernel that only responds on channel 1.
        let mut wt = vec![0.0; 3 * 3 * 2];
        for t in 0..9 {
            wt[t * 2 + 1] = 1.0;
        }
        let y = depthwise_fwd(&x, &wt, 3, 1, 1).unwrap();
        for ox in 0..4 {
            for oy in 0..4 {
                assert_eq!(y.at3(ox, oy, 0), 0.0);
            }
        }
        // Channel 1 = 3x3 box sum of channel 1.
        let mut expect = 0.0;
        for ix in 0..2 {
            for iy in 0..2 {
                expect += x.at3(ix, iy, 1);
            }
        }
        assert!((y.at3(0, 0, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn tconv_stride2_tiles_without_overlap() {
        // Constant kernel and single active input pixel: its 2x2 footprint
        // appears once, exactly.
        let mut x = Tensor::zeros(Shape::d3(3, 3, 1));
        x.set3(1, 1, 0, 1.0);
        let wt = vec![0.5; 2 * 2]; // (f,f,out_d=1,in_d=1)
        let y = tconv_fwd(&x, &wt, &[0.0], 2, 1, 2).unwrap();
        assert_eq!(y.shape().dims(), &[6, 6, 1]);
        let total: Real = y.data().iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        assert_eq!(y.at3(2, 2, 0), 0.5);
        assert_eq!(y.at3(3, 3, 0), 0.5);
        assert_eq!(y.at3(4, 4, 0), 0.0);
    }

    #[test]
    fn tconv_stride1_equals_same_padded_correlation() {
        // Stride 1 with a 2x2 kernel keeps the extent; compare against the
        // direct gather definition.
        let x = rand_tensor(4, 4, 2, 8);
        let wt = randn(2 * 2 * 3 * 2, 9); // out_d=3, in_d=2
        let b = randn(3, 10);
        let y = tconv_fwd(&x, &wt, &b, 2, 3, 1).unwrap();
        assert_eq!(y.shape().dims(), &[4, 4, 3]);
        for ox in 0..4 {
            for oy in 0..4 {
                for c in 0..3 {
                    let mut acc = b[c];
                    for fx in 0..2 {
                        for fy in 0..2 {
                            if ox < fx || oy < fy {
                                continue;
                            }
                            let (ix, iy) = (ox - fx, oy - fy);
                            for q in 0..2 {
                                acc += x.at3(ix, iy, q) * wt[((fx * 2 + fy) * 3 + c) * 2 + q];
                            }
                        }
                    }
                    assert!((y.at3(ox, oy, c) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tconv_is_adjoint_of_strided_conv() {
        // <conv2d(x, K), y> == <x, tconv(y, K)> for the stride-2 valid
        // geometry the decoder uses. The same weight buffer serves both
        // ops: the conv reads it as (f,f,in=d,filters=r), the transposed
        // conv as (f,f,out=d,in=r) — the adjoint swaps the channel roles
        // without moving any element.
        let (d, r, f, s) = (3, 4, 2, 2);
        let x = rand_tensor(6, 6, d, 11);
        let wt = randn(f * f * d * r, 12);
        let cx = conv2d_fwd(&x, &wt, None, f, r, s, 0).unwrap();
        let y = rand_tensor(3, 3, r, 13);
        let ty = tconv_fwd(&y, &wt, &vec![0.0; d], f, d, s).unwrap();
        let lhs: Real = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn backward_passes_match_dot_product_identities() {
        // For linear ops, <f(x), g> must equal <x, bwd(g)> and likewise for
        // weights; this pins every backward routine to its forward.
        let (w, h, d, f, r, s, p) = (5, 5, 2, 3, 3, 2, 1);
        let x = rand_tensor(w, h, d, 20);
        let wt = randn(f * f * d * r, 21);
        let y = conv2d_fwd(&x, &wt, None, f, r, s, p).unwrap();
        let g = rand_tensor(y.shape().dims()[0], y.shape().dims()[1], r, 22);
        let (gx, gw, _gb) = conv2d_bwd(&x, &wt, &g, f, r, s, p, true).unwrap();
        let lhs: Real = y.data().iter().zip(g.data().iter()).map(|(a, b)| a * b).sum();
        let rhs_x: Real = x
            .data()
            .iter()
            .zip(gx.unwrap().data().iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs_x).abs() < 1e-10 * (1.0 + lhs.abs()));
        let rhs_w: Real = wt.iter().zip(gw.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10 * (1.0 + lhs.abs()));

        let dwt = randn(f * f * d, 23);
        let dy = depthwise_fwd(&x, &dwt, f, 1, 1).unwrap();
        let dg = rand_tensor(w, h, d, 24);
        let (dgx, dgw) = depthwise_bwd(&x, &dwt, &dg, f, 1, 1, true).unwrap();
        let lhs: Real = dy.data().iter().zip(dg.data().iter()).map(|(a, b)| a * b).sum();
        let rhs_x: Real = x
            .data()
            .iter()
            .zip(dgx.unwrap().data().iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs_w: Real = dwt.iter().zip(dgw.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10 * (1.0 + lhs.abs()));
        assert!((lhs - rhs_w).abs() < 1e-10 * (1.0 + lhs.abs()));

        let (m, n, in_d, out_d) = (3, 4, 3, 2);
        let tx = rand_tensor(m, n, in_d, 25);
        let twt = randn(2 * 2 * out_d * in_d, 26);
        let ty = tconv_fwd(&tx, &twt, &vec![0.0; out_d], 2, out_d, 2).unwrap();
        let tg = rand_tensor(2 * m, 2 * n, out_d, 27);
        let (tgx, tgw, _tgb) = tconv_bwd(&tx, &twt, &tg, 2, out_d, 2, true).unwrap();
        let lhs: Real = ty.data().iter().zip(tg.data().iter()).map(|(a, b)| a * b).sum();
        let rhs_x: Real = tx
            .data()
            .iter()
            .zip(tgx.unwrap().data().iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs_w: Real = twt.iter().zip(tgw.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10 * (1.0 + lhs.abs()));
        assert!((lhs - rhs_w).abs() < 1e-10 * (1.0 + lhs.abs()));
    }
}
