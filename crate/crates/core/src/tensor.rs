//! Dense tensors in channels-last `(width, height, depth)` layout.
//!
//! Data is stored row-major over the shape vector, so for a 3-D tensor the
//! element `(x, y, c)` lives at `(x * h + y) * d + c` and the depth axis is
//! contiguous. Convolution kernels put their filter axis last for the same
//! reason: inner loops over channels touch adjacent memory.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{CoreError, Result};

/// Working precision for every tensor element.
///
/// Double precision by default; the `single-precision` feature narrows it
/// to `f32` for speed at the cost of the tight test tolerances.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// Tensor extents, outermost axis first.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn d1(n: usize) -> Self {
        Shape(vec![n])
    }

    pub fn d3(w: usize, h: usize, d: usize) -> Self {
        Shape(vec![w, h, d])
    }

    pub fn d4(a: usize, b: usize, c: usize, d: usize) -> Self {
        Shape(vec![a, b, c, d])
    }

    /// Total element count (1 for a zero-rank shape).
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Extents of a rank-3 shape as `(w, h, d)`.
    pub fn whd(&self) -> Result<(usize, usize, usize)> {
        match self.0.as_slice() {
            [w, h, d] => Ok((*w, *h, *d)),
            other => Err(CoreError::shape(format!(
                "expected a rank-3 (w,h,d) tensor, got shape {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// A dense real tensor with an optional gradient slot of the same extent.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Real>,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    /// Build a tensor from raw data; fails if the length does not match the
    /// shape or any element is non-finite.
    pub fn new(shape: Shape, data: Vec<Real>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(CoreError::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        let t = Tensor {
            shape,
            data,
            grad: None,
        };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Build a tensor from raw data without the finiteness scan. The
    /// length must still match; used on hot paths (gradient plumbing)
    /// where the data was just produced by checked arithmetic.
    pub fn new_unchecked(shape: Shape, data: Vec<Real>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: Real) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> Real) -> Self {
        let n = shape.numel();
        let data = (0..n).map(&mut f).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Flat index of `(x, y, c)` in a rank-3 tensor (unchecked beyond debug).
    #[inline(always)]
    pub fn idx3(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.rank(), 3);
        let h = self.shape.0[1];
        let d = self.shape.0[2];
        (x * h + y) * d + c
    }

    #[inline(always)]
    pub fn at3(&self, x: usize, y: usize, c: usize) -> Real {
        self.data[self.idx3(x, y, c)]
    }

    #[inline(always)]
    pub fn set3(&mut self, x: usize, y: usize, c: usize, v: Real) {
        let i = self.idx3(x, y, c);
        self.data[i] = v;
    }

    /// The gradient slot, if one has been attached.
    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [Real]> {
        self.grad.as_deref_mut()
    }

    /// Attach (or reset) a zero gradient slot matching the tensor extent.
    pub fn alloc_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error out if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::contract(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {})",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute element (0 for an empty tensor).
    pub fn max_abs(&self) -> Real {
        self.data
            .iter()
            .fold(0.0, |m, v| crate::math::maxr(m, crate::math::abs(*v)))
    }
}

/// Output extent of a strided, padded correlation (applies per spatial axis):
/// `floor((w + 2p − f) / s) + 1`.
///
/// Fails when the padded extent cannot fit one filter tap (which would make
/// the output extent non-positive) or when `stride` is zero.
pub fn conv_extent(extent: usize, pad: usize, filter: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(CoreError::config("stride must be >= 1"));
    }
    if filter == 0 {
        return Err(CoreError::config("filter extent must be >= 1"));
    }
    let padded = extent + 2 * pad;
    if padded < filter {
        return Err(CoreError::config(format!(
            "non-positive output extent: input {extent} with padding {pad} cannot fit filter {filter}"
        )));
    }
    Ok((padded - filter) / stride + 1)
}

/// Render a shape list like `(a,b,c)` for error messages.
pub fn shape_list(dims: &[usize]) -> String {
    Shape(dims.to_vec()).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channels_last_row_major() {
        let t = Tensor::from_fn(Shape::d3(2, 3, 4), |i| i as Real);
        // (x*h + y)*d + c
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 3), 3.0);
        assert_eq!(t.at3(0, 1, 0), 4.0);
        assert_eq!(t.at3(1, 0, 0), 12.0);
        assert_eq!(t.at3(1, 2, 3), 23.0);
    }

    #[test]
    fn new_rejects_bad_length_and_non_finite() {
        assert!(Tensor::new(Shape::d3(2, 2, 1), vec![0.0; 3]).is_err());
        let err = Tensor::new(Shape::d1(2), vec![1.0, Real::NAN]).unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }

    #[test]
    fn conv_extent_matches_closed_form() {
        // 256 input, 3x3 same-padded stride 1.
        assert_eq!(conv_extent(256, 1, 3, 1).unwrap(), 256);
        // 64 input, 2x2 valid stride 2.
        assert_eq!(conv_extent(64, 0, 2, 2).unwrap(), 32);
        // 5 input, 3x3 valid stride 2 -> floor((5-3)/2)+1 = 2.
        assert_eq!(conv_extent(5, 0, 3, 2).unwrap(), 2);
        // Degenerate: filter larger than padded input.
        assert!(conv_extent(2, 0, 5, 1).is_err());
        assert!(conv_extent(8, 0, 3, 0).is_err());
    }
}
